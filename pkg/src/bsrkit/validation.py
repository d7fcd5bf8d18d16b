"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""
from __future__ import annotations

import numbers

import numpy as np

from .exceptions import ConfigurationError, ShapeError


def check_images(X, shape=None, allow_single: bool = True, value_range: bool = False,
                 name: str = "X") -> np.ndarray:
    """Return ``X`` as a contiguous float32 (N, C, H, W) array.

    A single (C, H, W) image is promoted to a batch of one when
    ``allow_single``. ``shape`` pins (C, H, W); ``value_range`` requires
    every pixel in [0, 1].
    """
    arr = np.asarray(X.data if hasattr(X, "data") and not isinstance(X, np.ndarray) else X)
    if arr.dtype.kind not in "fiub":
        raise ConfigurationError(f"{name} must be numeric, got dtype {arr.dtype}")
    arr = np.ascontiguousarray(arr, dtype=np.float32)
    if arr.ndim == 3 and allow_single:
        arr = arr[None]
    if arr.ndim != 4:
        raise ShapeError(f"{name} must have shape (N, C, H, W), got {arr.shape}")
    if shape is not None and tuple(arr.shape[1:]) != tuple(shape):
        raise ShapeError(f"{name} image shape {tuple(arr.shape[1:])} does not match expected {tuple(shape)}")
    if not np.all(np.isfinite(arr)):
        raise ConfigurationError(f"{name} contains NaN or Inf")
    if value_range and arr.size and (arr.min() < 0 or arr.max() > 1):
        raise ConfigurationError(f"{name} pixels must lie in [0, 1]")
    return arr


def check_labels(y, n_samples: int, num_classes: int | None = None, name: str = "y") -> np.ndarray:
    arr = np.asarray(y)
    if arr.ndim == 0:
        arr = arr.reshape(1)
    if arr.ndim != 1 or arr.shape[0] != n_samples:
        raise ShapeError(f"{name} must have shape ({n_samples},), got {arr.shape}")
    if arr.size and not np.all(np.equal(np.mod(arr, 1), 0)):
        raise ConfigurationError(f"{name} must hold integer class indices")
    arr = arr.astype(np.int64)
    if num_classes is not None and arr.size and (arr.min() < 0 or arr.max() >= num_classes):
        raise ConfigurationError(f"{name} has class indices outside [0, {num_classes})")
    return arr


def check_scalar(value, name: str, kind=numbers.Real, min_val=None, max_val=None,
                 include_min: bool = True, include_max: bool = True):
    if isinstance(value, bool) or not isinstance(value, kind):
        raise ConfigurationError(f"{name} must be {getattr(kind, '__name__', kind)}, got {value!r}")
    if min_val is not None and (value < min_val or (not include_min and value == min_val)):
        raise ConfigurationError(f"{name}={value!r} is below the allowed minimum {min_val}")
    if max_val is not None and (value > max_val or (not include_max and value == max_val)):
        raise ConfigurationError(f"{name}={value!r} is above the allowed maximum {max_val}")
    return value


def check_random_state(seed) -> np.random.Generator:
    """Turn ``None``, an int, a seed sequence or a Generator into a Generator."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
