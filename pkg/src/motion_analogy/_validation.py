"""Input validation helpers shared by the estimators and pipeline stages."""
from __future__ import annotations

import numbers

import numpy as np
from sklearn.exceptions import NotFittedError

__all__ = [
    "ValidationError",
    "ClipIOError",
    "CheckpointError",
    "NotFittedError",
    "check_positive_int",
    "check_frames",
    "check_latent_grid",
    "check_finite",
    "check_fitted",
]


class ValidationError(ValueError):
    """Raised when an argument violates a documented precondition."""


class ClipIOError(OSError):
    """Raised for unreadable or inconsistent clip directories."""


class CheckpointError(ValueError):
    """Raised when a checkpoint does not match the requested configuration."""


def check_positive_int(value, name, minimum=1):
    if isinstance(value, bool) or not isinstance(value, numbers.Integral):
        raise ValidationError(f"{name} must be an integer, got {value!r}")
    if value < minimum:
        raise ValidationError(f"{name} must be >= {minimum}, got {value}")
    return int(value)


def check_finite(array, name):
    array = np.asarray(array)
    if not np.all(np.isfinite(array)):
        raise ValidationError(f"{name} contains NaN or infinite values")
    return array


def check_frames(frames, name="frames", size=None):
    """Return ``frames`` as float32 (N, H, W, 3); a single (H, W, 3) frame is promoted."""
    frames = np.asarray(frames, dtype=np.float32)
    if frames.ndim == 3:
        frames = frames[None]
    if frames.ndim != 4 or frames.shape[-1] != 3:
        raise ValidationError(f"{name} must have shape (N, H, W, 3) or (H, W, 3), got {frames.shape}")
    if frames.shape[1] != frames.shape[2]:
        raise ValidationError(f"{name} must be square, got {frames.shape[1]}x{frames.shape[2]}")
    if size is not None and frames.shape[1] != size:
        raise ValidationError(f"{name} side length {frames.shape[1]} does not match expected size {size}")
    check_finite(frames, name)
    return frames


def check_latent_grid(latents, name="latents", grid=None, channels=4):
    """Return ``latents`` as float32 (N, h, w, C); a single (h, w, C) grid is promoted."""
    latents = np.asarray(latents, dtype=np.float32)
    if latents.ndim == 3:
        latents = latents[None]
    if latents.ndim != 4 or (channels is not None and latents.shape[-1] != channels):
        raise ValidationError(f"{name} must have shape (N, h, w, {channels}), got {latents.shape}")
    if grid is not None and tuple(latents.shape[1:3]) != tuple(grid):
        raise ValidationError(f"{name} grid {latents.shape[1:3]} does not match expected {tuple(grid)}")
    check_finite(latents, name)
    return latents


def check_fitted(estimator, attribute):
    if not hasattr(estimator, attribute):
        raise NotFittedError(
            f"This {type(estimator).__name__} instance is not fitted yet; call 'fit' first."
        )
