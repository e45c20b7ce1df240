"""Input validation helpers.

Small check_* functions in the spirit of sklearn's validation utilities:
they coerce to float arrays, verify shapes/finiteness, and raise
:class:`~strokefool.errors.InputError` with a usable message.
"""

import numpy as np

from .errors import InputError

# Control points may wander off-canvas during optimization, but runaway
# coordinates indicate divergence.  Bound: 4x the canvas extent.
CANVAS_SANITY_FACTOR = 4.0


def as_float_array(x, name="array"):
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    return arr


def check_control_points(points, canvas_hw=None, name="control points"):
    """Validate an (L, N, 2) control-point array; returns a float64 copy.

    A single curve may be passed as (N, 2); it is promoted to (1, N, 2).
    """
    arr = as_float_array(points, name)
    if arr.ndim == 2:
        arr = arr[np.newaxis]
    if arr.ndim != 3 or arr.shape[2] != 2:
        raise InputError(f"{name} must have shape (L, N, 2), got {np.shape(points)}")
    if arr.shape[0] < 1 or arr.shape[1] < 2:
        raise InputError(f"{name} needs L >= 1 curves and N >= 2 points, got {arr.shape[:2]}")
    if canvas_hw is not None:
        h, w = canvas_hw
        bound = CANVAS_SANITY_FACTOR * max(h, w)
        if np.any(np.abs(arr) > bound):
            raise InputError(f"{name} outside the +-{bound:g} px sanity bound; optimization diverged?")
    return arr


def check_curve(points, name="curve"):
    """Validate one curve's (N, 2) control points."""
    arr = as_float_array(points, name)
    if arr.ndim != 2 or arr.shape[1] != 2 or arr.shape[0] < 2:
        raise InputError(f"{name} must have shape (N, 2) with N >= 2, got {np.shape(points)}")
    return arr


def check_unit_param(x, name="x"):
    """Validate a curve parameter (scalar or array) in [0, 1]."""
    arr = np.asarray(x, dtype=np.float64)
    if not np.all(np.isfinite(arr)):
        raise InputError(f"{name} contains non-finite values")
    if np.any(arr < 0.0) or np.any(arr > 1.0):
        from .errors import DomainError

        raise DomainError(f"{name} must lie in [0, 1]")
    return arr


def check_image(pixels, name="image"):
    """Validate an (H, W, 3) image with values in [0, 1]."""
    arr = as_float_array(pixels, name)
    if arr.ndim != 3 or arr.shape[2] != 3:
        raise InputError(f"{name} must have shape (H, W, 3), got {np.shape(pixels)}")
    if arr.shape[0] < 8 or arr.shape[1] < 8:
        raise InputError(f"{name} must be at least 8x8, got {arr.shape[:2]}")
    if arr.min() < 0.0 or arr.max() > 1.0:
        raise InputError(f"{name} values must lie in [0, 1]")
    return arr


def check_canvas(canvas_hw):
    """Validate an (H, W) canvas size."""
    try:
        h, w = canvas_hw
    except (TypeError, ValueError):
        raise InputError(f"canvas must be an (H, W) pair, got {canvas_hw!r}") from None
    h, w = int(h), int(w)
    if h < 8 or w < 8:
        raise InputError(f"canvas must be at least 8x8, got {(h, w)}")
    return h, w


def check_positive(value, name):
    value = float(value)
    if not np.isfinite(value) or value <= 0.0:
        raise InputError(f"{name} must be positive and finite, got {value!r}")
    return value
