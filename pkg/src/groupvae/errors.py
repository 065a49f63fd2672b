"""Exception types shared across the package."""


class GroupVAEError(Exception):
    """Base class for all package errors."""


class InvalidDistributionError(GroupVAEError, ValueError):
    """A Gaussian was constructed from non-finite or mismatched tensors."""


class ShapeError(GroupVAEError, ValueError):
    """Tensor shapes do not match the configured dimensions."""


class FormatError(GroupVAEError, ValueError):
    """A binary file does not conform to its declared format.

    Carries the byte offset at which parsing failed.
    """

    def __init__(self, message: str, offset: int | None = None):
        if offset is not None:
            message = f"{message} (byte offset {offset})"
        super().__init__(message)
        self.offset = offset


class ConfigurationError(GroupVAEError, ValueError):
    """A run configuration value is invalid or inconsistent."""


class TrainingDivergedError(GroupVAEError, RuntimeError):
    """Training hit a non-finite loss; a diagnostic checkpoint was written."""

    def __init__(self, message: str, checkpoint_path=None):
        super().__init__(message)
        self.checkpoint_path = checkpoint_path
