from .tensor import ShapeError


class ConfigError(ValueError):
    """Invalid configuration."""


class IngestionError(IOError):
    """A dataset file could not be parsed; the message names the file and byte offset."""


class TrainingDiverged(RuntimeError):
    """The loss became non-finite; ``dump`` holds the offending batch ids and score statistics."""

    def __init__(self, message, dump=None):
        super().__init__(message)
        self.dump = dump or {}


__all__ = ["ShapeError", "ConfigError", "IngestionError", "TrainingDiverged"]
