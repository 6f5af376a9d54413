"""Exception hierarchy shared across the pipeline.

The CLI maps these onto process exit codes: configuration problems exit 2,
data problems exit 3 and numeric failures exit 4.
"""


class EchoError(Exception):
    exit_code = 1


class ConfigError(EchoError, ValueError):
    exit_code = 2


class DataError(EchoError):
    exit_code = 3


class FormatError(DataError, ValueError):
    """Malformed EAIV/EAIW container or PGM payload."""


class ValidationError(DataError, ValueError):
    """Label table or evaluation input that breaks a contract."""


class InsufficientFramesError(DataError, ValueError):
    pass


class InsufficientDataError(DataError, ValueError):
    pass


class SchemaError(DataError, KeyError):
    """Checkpoint tensors do not match the schema implied by a config."""

    def __str__(self):
        return str(self.args[0]) if self.args else ""


class NumericError(EchoError, ArithmeticError):
    exit_code = 4


class DimensionError(EchoError, ValueError):
    pass


class ContractError(EchoError, RuntimeError):
    pass
