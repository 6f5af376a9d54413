"""Model/training configuration and the flat ``key=value`` run-config files.

A run config file holds one experiment: architecture, sampling and
optimisation settings. Paths and seeds overrides come from the command line.
Preset files for the eight hyperparameter-search rows live in ``configs/``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from .errors import ConfigError
from .video import SamplingSpec

# (embed_dim, depth, heads); mlp_ratio is 4 for all of them
ARCH_SIZES = {
    "TOY": (64, 2, 4),
    "BASE": (768, 12, 12),
    "LARGE": (1024, 24, 16),
}
DECODER_SIZES = {"TOY": (32, 4, 4), "BASE": (128, 4, 4), "LARGE": (128, 4, 4)}


@dataclass(frozen=True)
class ModelConfig:
    arch_size: str = "TOY"
    image_size: int = 32
    num_frames: int = 8
    patch_size: int = 8
    tubelet_depth: int = 2
    use_class_token: bool = False
    recon_frames: int = 8
    sampling_mode: str = "rate"
    sampling_rate: int | None = 2
    target_fps: float = 50.0
    mask_ratio: float = 0.9
    target_norm: str = "per_token"
    norm_mean: float = 0.45
    norm_std: float = 0.225
    # None means "take the value implied by arch_size"
    embed_dim: int | None = None
    depth: int | None = None
    heads: int | None = None
    mlp_ratio: int = 4
    decoder_dim: int | None = None
    decoder_depth: int | None = None
    decoder_heads: int | None = None

    def __post_init__(self):
        if self.arch_size not in ARCH_SIZES:
            raise ConfigError(f"arch_size must be one of {sorted(ARCH_SIZES)}, got {self.arch_size!r}")
        dims = ARCH_SIZES[self.arch_size]
        dec = DECODER_SIZES[self.arch_size]
        for name, default in zip(("embed_dim", "depth", "heads"), dims):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        for name, default in zip(("decoder_dim", "decoder_depth", "decoder_heads"), dec):
            if getattr(self, name) is None:
                object.__setattr__(self, name, default)
        self.validate()

    def validate(self):
        for name in ("image_size", "num_frames", "patch_size", "tubelet_depth", "embed_dim", "depth",
                     "heads", "mlp_ratio", "decoder_dim", "decoder_depth", "decoder_heads"):
            if int(getattr(self, name)) < 1:
                raise ConfigError(f"{name} must be >= 1, got {getattr(self, name)}")
        if self.image_size % self.patch_size:
            raise ConfigError(f"image_size={self.image_size} is not divisible by patch_size={self.patch_size}")
        if self.num_frames % self.tubelet_depth:
            raise ConfigError(f"num_frames={self.num_frames} is not divisible by tubelet_depth={self.tubelet_depth}")
        if self.embed_dim % self.heads:
            raise ConfigError(f"heads={self.heads} does not divide embed_dim={self.embed_dim}")
        if self.decoder_dim % self.decoder_heads:
            raise ConfigError(f"decoder_heads={self.decoder_heads} does not divide decoder_dim={self.decoder_dim}")
        if not 1 <= self.recon_frames <= self.num_frames:
            raise ConfigError(f"recon_frames={self.recon_frames} must lie in [1, num_frames={self.num_frames}]")
        if not 0 < self.mask_ratio < 1:
            raise ConfigError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")
        if self.target_norm not in ("per_token", "raw"):
            raise ConfigError(f"target_norm must be per_token or raw, got {self.target_norm!r}")
        if self.sampling_mode == "rate" and (self.sampling_rate is None or self.sampling_rate < 1):
            raise ConfigError("rate-based sampling needs sampling_rate >= 1")
        if self.sampling_mode == "equally_spaced" and self.sampling_rate is not None:
            raise ConfigError("sampling_rate conflicts with sampling_mode=equally_spaced")
        if self.norm_std <= 0:
            raise ConfigError("norm_std must be positive")
        SamplingSpec(self.num_frames, self.sampling_mode, self.sampling_rate or 1, self.target_fps)

    @property
    def sampling(self) -> SamplingSpec:
        return SamplingSpec(self.num_frames, self.sampling_mode, self.sampling_rate or 1, self.target_fps)

    def replace(self, **changes) -> "ModelConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class TrainConfig:
    epochs: int = 50
    grad_accum: int = 2
    batch_size: int = 8
    seed: int = 0
    pretrain_lr: float = 0.0016
    finetune_lr: float = 0.0024
    weight_decay: float = 0.05
    warmup_frac: float = 0.0
    beta1: float = 0.9
    pretrain_beta2: float = 0.95
    finetune_beta2: float = 0.999
    eps: float = 1e-8
    augment_strength: float = 0.0
    checkpoint_every: int = 0

    def __post_init__(self):
        if self.epochs < 1:
            raise ConfigError("epochs must be >= 1")
        if self.grad_accum < 1:
            raise ConfigError("grad_accum must be >= 1")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if self.pretrain_lr <= 0 or self.finetune_lr <= 0:
            raise ConfigError("learning rates must be positive")
        if not 0 <= self.warmup_frac < 1:
            raise ConfigError("warmup_frac must lie in [0, 1)")
        if not 0 <= self.augment_strength <= 1:
            raise ConfigError("augment_strength must lie in [0, 1]")

    def replace(self, **changes) -> "TrainConfig":
        return dataclasses.replace(self, **changes)


@dataclass(frozen=True)
class RunConfig:
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

def _parse_bool(text: str) -> bool:
    lowered = text.strip().lower()
    if lowered in ("true", "1", "yes"):
        return True
    if lowered in ("false", "0", "no"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


# key -> (section, field, parser)
_KEYS = {
    "arch_size": ("model", "arch_size", lambda s: s.strip().upper()),
    "image_size": ("model", "image_size", int),
    "num_frames": ("model", "num_frames", int),
    "sampling_mode": ("model", "sampling_mode", str.strip),
    "sampling_rate": ("model", "sampling_rate", int),
    "target_fps": ("model", "target_fps", float),
    "patch_size": ("model", "patch_size", int),
    "tubelet_depth": ("model", "tubelet_depth", int),
    "recon_frames": ("model", "recon_frames", int),
    "mask_ratio": ("model", "mask_ratio", float),
    "use_class_token": ("model", "use_class_token", _parse_bool),
    "target_norm": ("model", "target_norm", str.strip),
    "norm_mean": ("model", "norm_mean", float),
    "norm_std": ("model", "norm_std", float),
    "embed_dim": ("model", "embed_dim", int),
    "depth": ("model", "depth", int),
    "heads": ("model", "heads", int),
    "decoder_dim": ("model", "decoder_dim", int),
    "decoder_depth": ("model", "decoder_depth", int),
    "decoder_heads": ("model", "decoder_heads", int),
    "base_lr": ("train", "pretrain_lr", float),
    "finetune_lr": ("train", "finetune_lr", float),
    "epochs": ("train", "epochs", int),
    "grad_accum": ("train", "grad_accum", int),
    "batch_size": ("train", "batch_size", int),
    "seed": ("train", "seed", int),
    "weight_decay": ("train", "weight_decay", float),
    "warmup_frac": ("train", "warmup_frac", float),
    "augment_strength": ("train", "augment_strength", float),
    "checkpoint_every": ("train", "checkpoint_every", int),
}
KNOWN_KEYS = frozenset(_KEYS)


def parse_run_config(text: str, source: str = "<config>") -> RunConfig:
    sections: dict[str, dict] = {"model": {}, "train": {}}
    seen = set()
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        if key not in _KEYS:
            raise ConfigError(f"{source}:{lineno}: unknown key {key!r}")
        if key in seen:
            raise ConfigError(f"{source}:{lineno}: duplicate key {key!r}")
        seen.add(key)
        section, name, parse = _KEYS[key]
        try:
            sections[section][name] = parse(value)
        except ValueError as exc:
            raise ConfigError(f"{source}:{lineno}: bad value for {key}: {exc}") from None
    model = sections["model"]
    if model.get("sampling_mode") == "equally_spaced":
        model.setdefault("sampling_rate", None)
    try:
        return RunConfig(ModelConfig(**model), TrainConfig(**sections["train"]))
    except ConfigError as exc:
        raise ConfigError(f"{source}: {exc}") from None


def format_run_config(cfg: RunConfig) -> str:
    values = {"model": dataclasses.asdict(cfg.model), "train": dataclasses.asdict(cfg.train)}
    lines = []
    for key, (section, name, _) in _KEYS.items():
        value = values[section][name]
        if value is None:
            continue
        lines.append(f"{key}={str(value).lower() if isinstance(value, bool) else value}")
    return "\n".join(lines) + "\n"


PRESETS = tuple(f"exp{i}" for i in range(1, 9)) + ("toy",)


def preset_path(name: str) -> Path:
    return Path(str(resources.files("echoai") / "configs" / f"{name}.cfg"))


def load_run_config(path_or_preset) -> RunConfig:
    """Read a config file, or a shipped preset by name (``exp1`` ... ``exp8``, ``toy``)."""
    path = Path(path_or_preset)
    if not path.exists() and str(path_or_preset) in PRESETS:
        path = preset_path(str(path_or_preset))
    if not path.exists():
        raise ConfigError(f"config file {path_or_preset} not found")
    return parse_run_config(path.read_text(), str(path))
