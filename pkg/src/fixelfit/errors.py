"""Exception hierarchy shared across the package.

The CLI maps these onto distinct exit codes: ConfigError -> 2,
DataError -> 3, NumericalError -> 4.
"""


class FixelfitError(Exception):
    """Base class for all package-specific errors."""


class ConfigError(FixelfitError):
    """Invalid or inconsistent configuration (bad key, bad value, bad flag)."""


class DataError(FixelfitError):
    """Malformed input data: gradient tables, NIfTI files, shape mismatches."""


class NumericalError(FixelfitError):
    """Numerical failure during fitting: divergence, non-finite objective."""
