"""Masked-autoencoder video transformer pretraining and ejection-fraction regression on echo-style clips."""

from .config import ModelConfig, RunConfig, TrainConfig, load_run_config
from .errors import (ConfigError, ContractError, DataError, EchoError, FormatError, NumericError,
                     SchemaError, ValidationError)
from .metrics import EvalPair, EvalReport, compute_report
from .model import ViViT

__version__ = "0.1.0"

__all__ = [
    "ConfigError", "ContractError", "DataError", "EchoError", "EvalPair", "EvalReport", "FormatError",
    "ModelConfig", "NumericError", "RunConfig", "SchemaError", "TrainConfig", "ValidationError", "ViViT",
    "compute_report", "load_run_config",
]
