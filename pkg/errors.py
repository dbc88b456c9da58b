class AvseError(Exception):
    """Base class for every error raised by the trainer."""

    exit_code = 1


class InvalidInputError(AvseError, ValueError):
    """Shape, dimension or contract violation on an input."""


class ConfigError(AvseError, ValueError):
    """Invalid or infeasible configuration."""

    exit_code = 2


class CorpusFormatError(AvseError, ValueError):
    """Corpus or checkpoint file is malformed, truncated or inconsistent."""

    exit_code = 3


class NumericError(AvseError, ArithmeticError):
    """A non-finite value reached a place that requires finite values."""

    exit_code = 4


class InfeasibleAlignmentError(AvseError, ValueError):
    """CTC input is too short to emit its label sequence."""


class ConsistencyError(AvseError, RuntimeError):
    """Forward cache and parameter store do not belong together."""
