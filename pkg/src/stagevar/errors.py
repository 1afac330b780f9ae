"""Exception types shared across the package."""


class StageVarError(Exception):
    """Base class for errors raised by this package."""


class ConfigError(StageVarError):
    """Invalid or inconsistent run configuration."""


class DegenerateInputError(StageVarError, ValueError):
    """Input is structurally valid but degenerate (e.g. all-zero matrix)."""


class NumericFailureError(StageVarError, ArithmeticError):
    """A computation produced non-finite values."""
