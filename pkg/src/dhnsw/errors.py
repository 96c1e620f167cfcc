"""Exception hierarchy shared by every dhnsw module."""


class DhnswError(Exception):
    """Base class for all errors raised by this package."""


class DimensionMismatchError(DhnswError, ValueError):
    pass


class EmptyIndexError(DhnswError, ValueError):
    pass


class DuplicateIdError(DhnswError, KeyError):
    pass


class CodecError(DhnswError):
    """A serialized blob could not be decoded."""


class BadMagicError(CodecError):
    pass


class ChecksumError(CodecError):
    pass


class TruncatedError(CodecError):
    pass


class CapacityError(DhnswError):
    """An overflow region is full; the owning cluster needs a rebuild."""


class BoundsError(DhnswError, IndexError):
    pass


class AlignmentError(DhnswError, ValueError):
    pass


class TransportError(DhnswError, ConnectionError):
    pass


class StaleDirectoryError(DhnswError):
    pass


class DatasetError(DhnswError):
    pass


class ConfigError(DhnswError, ValueError):
    pass
