"""Exception types shared across the package."""


class ConfigError(ValueError):
    """Invalid configuration value or inconsistent settings."""


class ShapeError(ValueError):
    """Tensor shape does not match what the model expects."""


class InvalidInputError(ValueError):
    """Input values outside the accepted domain (e.g. non-finite pixels)."""


class UnsupportedHeadError(TypeError):
    """Loss head that cannot be differentiated through."""


class DegenerateDataError(ValueError):
    """Dataset unusable for training, e.g. a single class."""


class EmptyInputError(ValueError):
    pass


class CheckpointError(RuntimeError):
    """Checkpoint missing, unreadable, or carrying the wrong format tag."""

    def __init__(self, message, path=None):
        super().__init__(message)
        self.path = path
