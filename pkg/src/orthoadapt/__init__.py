"""Continual test-time adaptation with orthogonal low-rank adapters and image masking."""

from .errors import (
    ConfigurationError,
    DataError,
    DimensionError,
    FormatError,
    NonFiniteError,
    OrthoAdaptError,
    StructuralError,
    UsageError,
)

__version__ = "0.1.0"

__all__ = [
    "ConfigurationError",
    "DataError",
    "DimensionError",
    "FormatError",
    "NonFiniteError",
    "OrthoAdaptError",
    "StructuralError",
    "UsageError",
    "__version__",
]
