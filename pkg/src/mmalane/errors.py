"""Exception hierarchy shared by every module.

The CLI maps each family onto its own exit code, so new errors should
subclass one of the three bases below.
"""


class MMALaneError(Exception):
    """Base class for all package errors."""


class ConfigError(MMALaneError, ValueError):
    """A configuration value or flag combination is invalid."""


class ValidationError(MMALaneError, ValueError):
    """Input data violates a documented invariant."""


class ParseError(ValidationError):
    """An annotation file does not match the canonical schema."""


class DegenerateGeometryError(ValidationError):
    """A polynomial fit is rank deficient."""


class ShapeError(ValidationError):
    """Tensor or image shapes are inconsistent."""


class IntegrityError(ValidationError):
    """A dataset on disk is incomplete or inconsistent."""


class PreconditionError(ValidationError):
    """A required artifact (e.g. a checkpoint) is missing."""


class TrainingDivergedError(MMALaneError, RuntimeError):
    """The loss became non-finite during training."""


class FrameError(ValidationError):
    """Wraps an error raised while processing a single frame."""

    def __init__(self, frame_index: int, cause: Exception):
        self.frame_index = frame_index
        self.cause = cause
        super().__init__(f"frame {frame_index}: {cause}")
