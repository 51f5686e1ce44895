"""Exception hierarchy shared across the toolkit.

The CLI maps these onto exit codes (config 2, data 3, numeric 4), so new
error conditions should subclass one of the three roots below.
"""


class ConfigError(ValueError):
    """A configuration value or config file is invalid."""


class DataError(ValueError):
    """Input data violates a contract (bad file, bad column, bad labels)."""


class ShapeError(DataError):
    """Array shapes or parameter layouts do not line up."""


class NumericError(ArithmeticError):
    """A numeric computation produced non-finite or degenerate values."""
