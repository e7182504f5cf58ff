"""Exception hierarchy shared across the package."""


class SsamError(Exception):
    """Base class for all errors raised by this package."""


class DimensionError(SsamError):
    """Operand shapes are incompatible with the requested operation."""


class DegenerateInputError(SsamError):
    """Input is numerically degenerate (e.g. a zero-norm row where a
    direction is required)."""


class NumericError(SsamError):
    """A computation produced a non-finite value."""


class ConfigError(SsamError):
    """A configuration value violates its contract."""


class GenerationQualityError(ConfigError):
    """A synthetic benchmark spec produced data the frozen encoder cannot
    classify above chance; the spec is considered degenerate."""


class FormatError(SsamError):
    """A serialized file is malformed; the message names the byte offset
    where parsing failed."""
