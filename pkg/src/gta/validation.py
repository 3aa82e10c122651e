"""Input validation helpers in the spirit of ``sklearn.utils.validation``."""

import numpy as np

from .errors import DimMismatch, NonPositiveDepth


def check_frame(frame, name="frame"):
    """Return ``frame`` as a float32 ``(H, W, C)`` array."""
    arr = np.asarray(frame, dtype=np.float32)
    if arr.ndim == 2:
        arr = arr[:, :, None]
    if arr.ndim != 3:
        raise DimMismatch(f"{name} must be (H, W, C), got shape {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise DimMismatch(f"{name} contains non-finite values")
    return arr


def check_depth(depth, name="depth", positive=True):
    """Return ``depth`` as a float32 ``(H, W)`` array, optionally requiring depth > 0."""
    arr = np.asarray(depth, dtype=np.float32)
    if arr.ndim == 3 and arr.shape[2] == 1:
        arr = arr[:, :, 0]
    if arr.ndim != 2:
        raise DimMismatch(f"{name} must be (H, W), got shape {arr.shape}")
    if positive and not np.all(arr > 0):
        raise NonPositiveDepth(f"{name} has non-positive entries")
    return arr


def check_same_hw(a, b, what="inputs"):
    if a.shape[:2] != b.shape[:2]:
        raise DimMismatch(f"{what} disagree in size: {a.shape[:2]} vs {b.shape[:2]}")


def check_intrinsics_match(arr, intr, name="image"):
    if arr.shape[:2] != (intr.height, intr.width):
        raise DimMismatch(
            f"{name} is {arr.shape[:2]}, intrinsics expect {(intr.height, intr.width)}"
        )


def check_rng(seed):
    """Turn ``None``, an int, or a Generator into a ``numpy.random.Generator``."""
    if isinstance(seed, np.random.Generator):
        return seed
    return np.random.default_rng(seed)
