"""Exception hierarchy shared by every module.

Each class carries the process exit code the CLI maps it to.
"""


class DeepDemandError(Exception):
    exit_code = 1


class ConfigError(DeepDemandError, ValueError):
    """Bad configuration or precondition on user-supplied settings."""

    exit_code = 2


class ShapeError(DeepDemandError, ValueError):
    exit_code = 4


class NumericError(DeepDemandError, ArithmeticError):
    """Non-finite values, divergence, undefined ratios."""

    exit_code = 4


class DataValidationError(DeepDemandError, ValueError):
    exit_code = 3


class SchemaError(DataValidationError):
    pass


class CorruptFileError(DataValidationError):
    pass


class VersionMismatchError(DataValidationError):
    pass


class StructuralError(DeepDemandError, ValueError):
    """Estimator cannot represent the requested market structure."""

    exit_code = 4


class InversionError(NumericError):
    pass


class PlanError(ConfigError):
    pass
