"""Exception types shared across the package.

The CLI maps these onto process exit codes: ConfigError -> 2,
DataError -> 3, NumericError -> 4.
"""


class SaderkitError(Exception):
    pass


class ConfigError(SaderkitError):
    """Invalid configuration, dimensions, or arguments."""


class DataError(SaderkitError):
    """Missing or malformed on-disk data."""


class NumericError(SaderkitError):
    """Non-finite values or numerically invalid state."""
