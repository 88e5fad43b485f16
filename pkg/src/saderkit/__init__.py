"""Multi-temporal cloud removal with mean-reverting conditional diffusion."""

__version__ = "0.1.0"

from .errors import ConfigError, DataError, NumericError, SaderkitError
from .schedule import Schedule

__all__ = [
    "ConfigError",
    "DataError",
    "NumericError",
    "SaderkitError",
    "Schedule",
    "__version__",
]
