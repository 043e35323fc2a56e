"""Exception hierarchy shared across the toolkit."""


class StavcError(Exception):
    """Base class for all toolkit errors."""


class DimensionError(StavcError, ValueError):
    """Tensor shapes are incompatible with an operation."""


class NumericError(StavcError, ArithmeticError):
    """An operation produced (or would produce) a non-finite value."""


class DomainError(StavcError, ValueError):
    """An argument lies outside the mathematical domain of an operation."""


class UsageError(StavcError):
    """An API or CLI was called in a way its contract forbids."""


class CodingError(StavcError):
    """Entropy coding failed, e.g. a symbol outside the coder support."""


class CorruptStreamError(StavcError):
    """A bitstream or checkpoint failed validation while decoding."""


class IngestionError(StavcError):
    """Frames on disk could not be loaded into a clip."""


class SyncError(StavcError):
    """Encoder and decoder reconstructions diverged."""
