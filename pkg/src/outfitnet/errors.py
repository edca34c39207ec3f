"""Exception types shared across the package."""


class OutfitNetError(Exception):
    """Base class for every error raised by this package."""


class ShapeError(OutfitNetError, ValueError):
    """Array shapes or dimensions do not match an operation's contract."""


class NumericError(OutfitNetError, ValueError):
    """Non-finite values where finite ones are required."""


class ConfigError(OutfitNetError, ValueError):
    """Invalid configuration values."""


class BatchError(OutfitNetError, ValueError):
    """Batch too small for a batch-statistics operation."""


class ItemTypeError(OutfitNetError, ValueError):
    """Duplicate or invalid item types in an outfit."""


class VocabError(OutfitNetError, KeyError):
    """Token not present in the vocabulary."""


class InputError(OutfitNetError, ValueError):
    """Empty or otherwise unusable input."""


class ModelError(OutfitNetError, RuntimeError):
    """Model missing, untrained or unusable for the requested operation."""


class PoolError(OutfitNetError, ValueError):
    """Candidate pool empty or too small."""


class SamplingError(OutfitNetError, RuntimeError):
    """Rejection sampling exhausted its retry budget."""


class DataError(OutfitNetError, ValueError):
    """Dataset contents violate an expectation (e.g. a type has no items)."""


class IoError(OutfitNetError, OSError):
    """Filesystem read/write failure."""


class FormatError(OutfitNetError, ValueError):
    """Malformed on-disk artifact (image, manifest or checkpoint).

    ``offset`` is the byte offset at which parsing failed, when known.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (at byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class MetricError(OutfitNetError, ValueError):
    """Metric undefined for the given inputs (e.g. single-class AUC)."""


class DivergenceError(OutfitNetError, RuntimeError):
    """Training produced non-finite values.

    ``parameter`` names the first parameter bank found to be non-finite.
    """

    def __init__(self, message: str, parameter: str | None = None):
        super().__init__(message)
        self.parameter = parameter
