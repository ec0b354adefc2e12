class BitromError(Exception):
    """Base class for simulator errors."""


class ValidationError(BitromError, ValueError):
    """Input or configuration violates a documented precondition."""


class CorruptionError(BitromError, ValueError):
    """A serialized buffer holds a code that no valid value encodes."""


class InvariantError(BitromError, RuntimeError):
    """An internal consistency check failed."""
