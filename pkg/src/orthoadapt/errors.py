"""Exception types raised across the package."""


class OrthoAdaptError(Exception):
    """Base class of every error this package raises on purpose."""


class ConfigurationError(OrthoAdaptError, ValueError):
    """Invalid hyperparameter, placement or layer configuration."""


class DimensionError(OrthoAdaptError, ValueError):
    """Operand shapes are incompatible."""


class UsageError(OrthoAdaptError, RuntimeError):
    """An API was called in a state where the call makes no sense."""


class FormatError(OrthoAdaptError, ValueError):
    """A file on disk does not follow the expected layout."""

    def __init__(self, message, offset=None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class DataError(OrthoAdaptError, ValueError):
    """Input data violates a value-range contract (e.g. class id out of range)."""


class StructuralError(OrthoAdaptError, ValueError):
    """Two parameter sets that must share a topology do not."""


class NonFiniteError(OrthoAdaptError, ArithmeticError):
    """A computation produced NaN or Inf."""
