"""Exception types shared across the package."""


class DiffusionLabError(Exception):
    """Base class for errors raised by this package."""


class NumericError(DiffusionLabError):
    """A computation became numerically degenerate (NaN/Inf, underflow, non-PSD)."""


class BudgetError(DiffusionLabError):
    """An exactness or resource budget was exceeded."""


class ConfigError(DiffusionLabError):
    """A configuration file or option set is invalid."""


class DataError(DiffusionLabError):
    """A dataset or serialized artifact is malformed."""
