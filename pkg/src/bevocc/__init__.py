"""Micro bird's-eye-view occupancy pipeline on a small numpy autodiff core."""

from .errors import BevOccError, ConfigError, DomainError, IoError, NumericsError, ShapeError

__version__ = "0.1.0"

__all__ = ["BevOccError", "ConfigError", "DomainError", "IoError", "NumericsError", "ShapeError", "__version__"]
