"""Exception types shared across the package."""


class ContractError(ValueError):
    """An argument or state violates a documented precondition."""


class ShapeMismatchError(ContractError):
    """Operands have incompatible shapes; the message names both."""


class NumericError(ArithmeticError):
    """A computation produced or received non-finite values."""


class SingularMatrixError(ContractError):
    """A matrix required to be invertible (or to have nonzero rows) is not."""


class ConfigError(ValueError):
    """A run-configuration file or override is malformed."""


class CheckpointError(ValueError):
    """A checkpoint file is malformed, truncated, or corrupt."""


class UnsupportedVersionError(CheckpointError):
    """A checkpoint declares a format version this build does not read."""
