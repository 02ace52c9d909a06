# errors.py - exception types shared by the api modules

from typing import Optional


class OledError(Exception):
    """Base class for every error raised by the toolkit"""


class ConfigurationError(OledError, ValueError):
    """Invalid parameter values, ranges or experiment configuration"""


class ShapeError(OledError, ValueError):
    """Raster or tensor dimensions that do not fit together"""


class ContainerError(OledError, ValueError):
    """Malformed OIMG / OLNC / manifest file"""


class CheckpointError(OledError, ValueError):
    """Checkpoint that is uninitialised or does not match the requested configuration"""


class TrainingDivergedError(OledError, RuntimeError):
    """Training produced a non-finite loss"""

    def __init__(self, message: str, iteration: int, checkpoint_path: Optional[str] = None):
        super().__init__(message)
        self.iteration = iteration
        self.checkpoint_path = checkpoint_path
