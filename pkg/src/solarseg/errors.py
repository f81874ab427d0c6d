"""Exception hierarchy shared across the package.

Two broad failure classes matter to callers: bad inputs/configuration
(`ValidationError` and friends, CLI exit code 1) and numeric/runtime
failures during a run (`NumericError`, CLI exit code 2).
"""


class SolarSegError(Exception):
    """Base class for every error raised by this package."""


class ValidationError(SolarSegError):
    """Invalid input, configuration, or on-disk data."""


class DatasetLayoutError(ValidationError):
    """A required dataset directory or file is missing."""


class UnreadableImageError(ValidationError):
    """An image file could not be read in the expected format."""


class DimensionMismatchError(ValidationError):
    """Paired image/mask (or batch/arch) dimensions disagree."""


class NonBinaryMaskError(ValidationError):
    """A mask file contains values other than 0 and 255."""


class CheckpointError(SolarSegError):
    """Base class for checkpoint-file problems."""


class BadMagicError(CheckpointError):
    """Checkpoint file does not start with the expected magic bytes."""


class TruncatedPayloadError(CheckpointError):
    """Checkpoint payload is shorter than its header declares."""


class ShapeMismatchError(CheckpointError):
    """Checkpoint header tensor shapes disagree with the architecture."""


class NumericError(SolarSegError):
    """A non-finite value appeared where training cannot proceed."""
