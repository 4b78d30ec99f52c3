"""Exception hierarchy shared by every stage."""

from __future__ import annotations


class StreamJoinError(Exception):
    """Base class for all errors raised by this package."""


class InvalidArgument(StreamJoinError, ValueError):
    pass


class InvalidConfiguration(StreamJoinError, ValueError):
    pass


class InvalidState(StreamJoinError):
    pass


class SchemaViolation(StreamJoinError, ValueError):
    """A record does not conform to the schema it is being encoded with."""


class DecodeError(StreamJoinError, ValueError):
    """Bytes could not be decoded. Subclasses narrow down why."""


class TruncatedInput(DecodeError):
    pass


class TrailingBytes(DecodeError):
    pass


class MalformedVarint(DecodeError):
    pass


class CorruptBlock(DecodeError):
    """An LZ4 block violates the block format or the expected length."""


class AlreadyExists(StreamJoinError):
    pass


class NotFound(StreamJoinError):
    pass


class OffsetOutOfRange(StreamJoinError):
    """Requested offset lies below the retention floor of a partition."""


class RestoreFailed(StreamJoinError):
    pass


class InputError(StreamJoinError):
    """A results table or trace file could not be read."""
