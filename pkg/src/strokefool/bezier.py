"""Bezier curve evaluation and differentiation.

A curve with N control points P_1..P_N is

    B(x) = sum_n  C(N-1, n-1) x^(n-1) (1-x)^(N-n) P_n,      x in [0, 1],

evaluated here with the numerically stable De Casteljau recurrence.  The
curve is linear in its control points, so the sensitivity of B(x) to P_n
is simply the Bernstein weight of P_n times the 2x2 identity.
"""

from dataclasses import dataclass
from math import comb

import numpy as np

from .validation import check_curve, check_unit_param


def bernstein_weights(n_points, x):
    """Bernstein weights for a curve with ``n_points`` control points.

    ``x`` may be a scalar or a 1-D array; returns shape (..., n_points).
    Weights are non-negative and sum to 1 (partition of unity).
    """
    if n_points < 2:
        raise ValueError("need at least 2 control points")
    x = check_unit_param(x)
    xs = np.atleast_1d(x)[..., np.newaxis]  # (..., 1)
    n = n_points - 1
    ks = np.arange(n_points)
    coeff = np.array([comb(n, k) for k in ks], dtype=np.float64)
    # 0**0 = 1 under np.power, which is exactly what the endpoint cases need.
    w = coeff * np.power(xs, ks) * np.power(1.0 - xs, n - ks)
    return w if np.ndim(x) else w[0]


def evaluate_bezier(points, x):
    """Evaluate one curve at parameter ``x`` via De Casteljau.

    ``points`` is (N, 2); ``x`` a scalar in [0, 1] (or an array, giving
    one point per parameter).  Agrees with the direct Bernstein sum to
    ~1e-10 but is stable for high N.
    """
    pts = check_curve(points)
    x = check_unit_param(x)
    scalar = np.ndim(x) == 0
    xs = np.atleast_1d(x)[:, np.newaxis, np.newaxis]  # (M, 1, 1)
    b = np.broadcast_to(pts, (xs.shape[0],) + pts.shape).copy()
    for _ in range(pts.shape[0] - 1):
        b = (1.0 - xs) * b[:, :-1] + xs * b[:, 1:]
    out = b[:, 0]
    return out[0] if scalar else out


def bezier_jacobian(points, x):
    """Sensitivity of B(x) to every control point, shape (N, 2, 2).

    Block n is ``bernstein_weight_n * I2``; the blocks sum to the identity
    for any x (the curve is an affine combination of its control points).
    """
    pts = check_curve(points)
    w = bernstein_weights(pts.shape[0], float(x))
    return w[:, np.newaxis, np.newaxis] * np.eye(2)


@dataclass(frozen=True)
class Polyline:
    """Chordal approximation of one curve.

    vertices[j] = B(params[j]) with params[0] = 0 < ... < params[M] = 1.
    """

    vertices: np.ndarray      # (M+1, 2)
    source_params: np.ndarray  # (M+1,)

    def __post_init__(self):
        if self.vertices.shape[0] < 2:
            raise ValueError("a polyline needs at least 2 vertices")


_FLATTEN_CACHE = {}


def flatten_matrix(n_points, segments):
    """Bernstein weights at the M+1 uniform parameters, shape (M+1, N).

    Cached: the matrix depends only on (N, M), and vertices are then a
    single small product ``matrix @ points``.
    """
    key = (n_points, segments)
    cached = _FLATTEN_CACHE.get(key)
    if cached is None:
        params = np.arange(segments + 1, dtype=np.float64) / segments
        cached = (bernstein_weights(n_points, params), params)
        _FLATTEN_CACHE[key] = cached
    return cached


def flatten(points, segments):
    """Sample one curve at M+1 uniform parameters j/M into a Polyline."""
    if segments < 1:
        raise ValueError("segments must be >= 1")
    pts = check_curve(points)
    weights, params = flatten_matrix(pts.shape[0], segments)
    return Polyline(vertices=weights @ pts, source_params=params)
