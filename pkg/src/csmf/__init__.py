"""Cascaded selective-mask fine-tuning for multi-objective two-tower retrieval."""

from .errors import (
    ConfigError,
    CSMFError,
    DataError,
    IngestionError,
    LifecycleError,
    NumericError,
    ParseError,
    SamplingError,
    ShapeError,
    VersionError,
)
from .stagenet import Stage

__version__ = "0.1.0"

__all__ = [
    "Stage",
    "CSMFError",
    "ConfigError",
    "DataError",
    "IngestionError",
    "LifecycleError",
    "NumericError",
    "ParseError",
    "SamplingError",
    "ShapeError",
    "VersionError",
]
