"""
Exception hierarchy for ShiftTrace.

Every error raised on purpose by the library derives from ShiftTraceError so the
CLI can map it onto an exit code in a single place.
"""


class ShiftTraceError(Exception):
    """Base class for all ShiftTrace errors."""

    exit_code = 1


class ConfigError(ShiftTraceError, ValueError):
    """Invalid configuration value (environment or flags)."""


class ParseError(ShiftTraceError, ValueError):
    """A file cell could not be parsed."""


class SchemaError(ShiftTraceError, ValueError):
    """A file does not follow the expected layout."""


class ShapeError(ShiftTraceError, ValueError):
    """Array dimensions do not match."""


class DomainError(ShiftTraceError, ValueError):
    """An argument lies outside its valid range."""


class PreconditionError(ShiftTraceError, ValueError):
    """An operation was called on inputs it does not support."""


class CapacityError(ShiftTraceError):
    """A request exceeds a hard capacity limit."""


class TrainingError(ShiftTraceError):
    """A model could not be trained on the given data."""


class EvaluationError(ShiftTraceError):
    """A metric cannot be evaluated on the given scenario."""


class ProtocolError(ShiftTraceError):
    """An external model violated the batch prediction protocol."""
