"""Exception types raised across the package."""


class MSENetError(Exception):
    """Base class for all package errors."""


class DatasetError(MSENetError):
    """Dataset directory is missing, empty, or holds an unreadable file."""


class SplitError(MSENetError):
    """Class split request cannot be satisfied."""


class EpisodeError(MSENetError):
    """An episode cannot be drawn from the given classes."""


class ShapeError(MSENetError, ValueError):
    """Tensor shapes disagree with what an operation expects."""


class ConfigError(MSENetError):
    """Invalid configuration key or value."""


class CheckpointError(MSENetError):
    """Checkpoint or weight file is unreadable or incompatible."""


class TrainingDiverged(MSENetError):
    """Loss became non-finite during training.

    ``snapshot`` carries the episode seed and per-parameter norms at the
    moment of failure.
    """

    def __init__(self, message, snapshot=None):
        super().__init__(message)
        self.snapshot = snapshot or {}
