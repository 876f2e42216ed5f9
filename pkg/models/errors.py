"""Exception hierarchy shared by the front-end, model, trainer and CLI."""


class MainVCError(Exception):
    """Base class for all project errors."""


class ShapeError(MainVCError, ValueError):
    """Tensor or array dimensions do not fit an operation."""


class InputError(MainVCError):
    """User-supplied input cannot be processed (too short, missing, empty)."""


class AudioFormatError(InputError):
    """Audio file is unreadable, truncated or not an accepted PCM/float WAV."""


class NoEligibleSpeakerError(InputError):
    """No speaker has two utterances long enough to form a training pair."""


class ConfigMismatchError(MainVCError):
    """Stored configuration hash differs from the one expected by the caller."""


class CheckpointFormatError(MainVCError):
    """Checkpoint or mel file is truncated or malformed."""


class TrainingDivergedError(MainVCError):
    """Too many consecutive non-finite training steps."""


class GradientLeakError(MainVCError):
    """Gradient reached parameters that must stay untouched in the current phase."""
