"""Exception types shared across the package."""


class FodlocError(Exception):
    """Base class for all package errors."""


class FormatError(FodlocError):
    """Image has the wrong pixel format (channels, dtype, value range)."""


class SizeError(FodlocError):
    """Frame or patch dimensions violate a sizing precondition."""


class DimensionError(FodlocError):
    """Two arrays that must agree in shape do not."""


class ConfigError(FodlocError):
    """A spec or configuration object violates its invariants."""


class AnnotationError(FodlocError):
    """Malformed or inconsistent annotation data.

    Carries the 1-based line number of the offending CSV row when known.
    """

    def __init__(self, message, line=None):
        if line is not None:
            message = f"line {line}: {message}"
        super().__init__(message)
        self.line = line


class BoundsError(FodlocError):
    """A bounding box falls outside the image it is attached to."""


class CheckpointError(FodlocError):
    """Checkpoint file is missing, incompatible, or fails validation."""


class DataError(FodlocError):
    """Dataset is empty or otherwise unusable for the requested task."""


class NumericError(FodlocError):
    """Training diverged (non-finite loss)."""

    def __init__(self, message, epoch=None):
        super().__init__(message)
        self.epoch = epoch
