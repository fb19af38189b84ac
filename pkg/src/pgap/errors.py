"""Exception types shared across the package."""


class PgapError(Exception):
    """Base class for all package-specific errors."""


class DimensionError(PgapError, ValueError):
    """Operands have incompatible or invalid shapes."""


class NumericError(PgapError, ArithmeticError):
    """A numeric routine produced a non-finite value or failed to converge."""


class StateError(PgapError, RuntimeError):
    """An operation was invoked on state that does not support it."""


class InternalError(PgapError, RuntimeError):
    """An internal consistency check (e.g. restore checksum) failed."""


class ParseError(PgapError, ValueError):
    """A file could not be parsed; message carries row/column context."""


class CheckpointError(PgapError, RuntimeError):
    """A checkpoint file is missing, corrupt, or has the wrong format."""


class ConfigError(PgapError, ValueError):
    """A run configuration is invalid or contains unknown keys."""
