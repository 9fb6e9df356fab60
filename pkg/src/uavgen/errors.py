"""Exception types shared across the package."""


class ShapeError(ValueError):
    """A tensor argument has the wrong rank or dimensions."""


class ConfigError(ValueError):
    """A configuration value is missing, unknown, or inconsistent."""


class OracleFailure(RuntimeError):
    """A reference computation (finite differences, closed form) produced
    a non-finite or otherwise unusable value."""


class UndefinedScore(ValueError):
    """A metric is undefined for the given inputs (e.g. zero variance)."""


class FormatError(ValueError):
    """A binary file does not conform to the expected layout."""
