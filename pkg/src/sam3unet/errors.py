"""Exception hierarchy shared across the sam3unet package."""

from __future__ import annotations

from typing import Iterable, Optional


class Sam3UNetError(Exception):
    """Base class for every error raised on purpose by this package."""


class ConfigError(Sam3UNetError, ValueError):
    """Invalid configuration value, unknown key or bad override."""

    def __init__(self, message: str, *, key: Optional[str] = None) -> None:
        super().__init__(message)
        self.key = key


class ShapeError(Sam3UNetError, ValueError):
    """Tensor shape does not match what the operation expects."""


class ValidationError(Sam3UNetError, ValueError):
    """Input data violates a value-range contract (e.g. non-binary masks)."""


class CheckpointError(Sam3UNetError):
    """Checkpoint or pretrained file cannot be read or applied."""

    def __init__(self, message: str, *, name: Optional[str] = None) -> None:
        super().__init__(message)
        self.name = name


class DatasetError(Sam3UNetError):
    """Dataset layout problem: orphans, unreadable or invalid files."""

    def __init__(self, message: str, *, names: Iterable[str] = ()) -> None:
        super().__init__(message)
        self.names = list(names)


class TrainingAborted(Sam3UNetError):
    """Raised when the loss stops being finite."""

    def __init__(self, step: int, lr: float, loss: float) -> None:
        super().__init__(f"Non-finite loss at step {step} (lr={lr:.3e}, loss={loss})")
        self.step = step
        self.lr = lr
        self.loss = loss


__all__ = [
    "CheckpointError",
    "ConfigError",
    "DatasetError",
    "Sam3UNetError",
    "ShapeError",
    "TrainingAborted",
    "ValidationError",
]
