"""Differentiable stroke rasterizer.

Maps control points to a per-pixel coverage map in [0, 1] with analytic
gradients back to the control points.  Each curve is flattened to a
polyline; a pixel's coverage by one stroke is a logistic profile of its
distance d to the polyline:

    c(d) = sigmoid((width/2 - d) / softness)        for d <= cutoff,
    c(d) = 0                                        beyond,

with cutoff = width/2 + 6*softness (the clamped tail is < sigmoid(-6)
~ 2.5e-3).  Strokes combine by probabilistic union 1 - prod(1 - c_l),
which is smooth everywhere, unlike max.

Pixel (h, w) has its center at continuous coordinates (x, y) =
(w + 0.5, h + 0.5); y grows downward.

The distance field is piecewise smooth.  Its non-smooth set -- pixels on
the stroke centerline (d = 0), pixels equidistant from two polyline
locations (Voronoi boundaries of the segments), and pixels exactly on
the influence cutoff -- is where gradients are one-sided; finite
difference checks must avoid it.
"""

from dataclasses import dataclass

import numpy as np

from ._kernels import stroke_distance, stroke_vjp
from .bezier import flatten_matrix
from .validation import check_canvas, check_control_points, check_positive

CUTOFF_SOFTNESS_UNITS = 6.0
DEFAULT_WIDTH_PX = 1.5
DEFAULT_SOFTNESS_PX = 0.25
DEFAULT_SEGMENTS = 32


@dataclass
class CoverageMap:
    """Soft per-pixel stroke coverage on an H x W canvas."""

    values: np.ndarray  # (H, W) in [0, 1]
    width_px: float
    softness_px: float


def hard_mask(cov, threshold=0.5):
    """Binarize a coverage map: True where coverage >= threshold."""
    if not 0.0 < threshold < 1.0:
        raise ValueError("threshold must lie strictly between 0 and 1")
    values = cov.values if isinstance(cov, CoverageMap) else np.asarray(cov)
    return values >= threshold


def doodle_size(cov, mode="soft", threshold=0.5):
    """Covered-area ratio in [0, 1].

    soft: mean coverage (differentiable, used in the loss).
    hard: fraction of pixels over ``threshold`` (reported sizes).
    """
    values = cov.values if isinstance(cov, CoverageMap) else np.asarray(cov)
    if mode == "soft":
        return float(values.mean())
    if mode == "hard":
        return float(hard_mask(values, threshold).mean())
    raise ValueError(f"unknown size mode {mode!r}")


def _stroke_window(vertices, canvas_hw, cutoff):
    """Index window (h0, h1, w0, w1) of pixels a polyline can touch."""
    h, w = canvas_hw
    xmin, ymin = vertices.min(axis=0) - cutoff
    xmax, ymax = vertices.max(axis=0) + cutoff
    # pixel (r, c) center is (c + 0.5, r + 0.5); +-1 px slack for float edges
    w0 = max(0, int(np.floor(xmin - 0.5)) - 1)
    w1 = min(w, int(np.ceil(xmax - 0.5)) + 2)
    h0 = max(0, int(np.floor(ymin - 0.5)) - 1)
    h1 = min(h, int(np.ceil(ymax - 0.5)) + 2)
    if w0 >= w1 or h0 >= h1:
        return None
    return h0, h1, w0, w1


def _stroke_field(vertices, canvas_hw, width_px, softness_px):
    """Distance-based coverage of one polyline on its bounding window.

    Returns (window, coverage, cache) or None when the stroke cannot
    touch the canvas.  The cache carries everything the VJP needs: the
    envelope theorem at the clamped minimizer gives
    d dist / d a = -(1 - t) u  and  d dist / d b = -t u
    for segment endpoints a, b and unit vector u from the closest point
    to the pixel.
    """
    cutoff = 0.5 * width_px + CUTOFF_SOFTNESS_UNITS * softness_px
    window = _stroke_window(vertices, canvas_hw, cutoff)
    if window is None:
        return None
    h0, h1, w0, w1 = window
    cov, tpar, seg, ux, uy = stroke_distance(
        vertices, h0, w0, h1 - h0, w1 - w0, 0.5 * width_px, softness_px,
        cutoff)
    cache = (cov, tpar, seg, ux, uy, softness_px, vertices.shape[0])
    return window, cov.reshape(h1 - h0, w1 - w0), cache


def _stroke_grad(cache, d_cov_flat):
    """Gradient of sum(d_cov * coverage) w.r.t. the polyline vertices."""
    cov, tpar, seg, ux, uy, softness, n_vertices = cache
    return stroke_vjp(d_cov_flat, cov, tpar, seg, ux, uy, softness, n_vertices)


def rasterize_polylines(vertex_lists, canvas_hw, width_px=DEFAULT_WIDTH_PX,
                        softness_px=DEFAULT_SOFTNESS_PX):
    """Coverage map for pre-flattened strokes (e.g. freehand input)."""
    h, w = check_canvas(canvas_hw)
    check_positive(width_px, "width_px")
    check_positive(softness_px, "softness_px")
    transparency = np.ones((h, w))
    for vertices in vertex_lists:
        field = _stroke_field(np.asarray(vertices, dtype=np.float64),
                              (h, w), width_px, softness_px)
        if field is None:
            continue
        (h0, h1, w0, w1), cov, _ = field
        transparency[h0:h1, w0:w1] *= 1.0 - cov
    return CoverageMap(values=1.0 - transparency, width_px=width_px,
                       softness_px=softness_px)


def _raster_core(pts, h, w, width_px, softness_px, segments, want_fields):
    """Shared unchecked rasterization; returns (values, fields, bern)."""
    n_curves, n_ctrl = pts.shape[0], pts.shape[1]
    fields = [] if want_fields else None
    transparency = np.ones((h, w))
    bern, _ = flatten_matrix(n_ctrl, segments)  # (M+1, N)
    for l in range(n_curves):
        field = _stroke_field(bern @ pts[l], (h, w), width_px, softness_px)
        if want_fields:
            fields.append(field)
        if field is None:
            continue
        (h0, h1, w0, w1), cov, _ = field
        transparency[h0:h1, w0:w1] *= 1.0 - cov
    np.subtract(1.0, transparency, out=transparency)
    return transparency, fields, bern


def _make_vjp(pts, h, w, fields, bern):
    def vjp(upstream):
        upstream = np.asarray(upstream, dtype=np.float64)
        if upstream.shape != (h, w):
            raise ValueError(f"upstream must be {(h, w)}, got {upstream.shape}")
        grad = np.zeros_like(pts)
        for l, field in enumerate(fields):
            if field is None:
                continue
            (h0, h1, w0, w1), cov_l, cache = field
            # d union / d c_l = prod_{k != l} (1 - c_k), built on l's window
            excl = np.ones((h1 - h0, w1 - w0))
            for k, other in enumerate(fields):
                if k == l or other is None:
                    continue
                (oh0, oh1, ow0, ow1), cov_k, _ = other
                rh0, rh1 = max(h0, oh0), min(h1, oh1)
                rw0, rw1 = max(w0, ow0), min(w1, ow1)
                if rh0 >= rh1 or rw0 >= rw1:
                    continue
                excl[rh0 - h0:rh1 - h0, rw0 - w0:rw1 - w0] *= \
                    1.0 - cov_k[rh0 - oh0:rh1 - oh0, rw0 - ow0:rw1 - ow0]
            d_cov = (upstream[h0:h1, w0:w1] * excl).reshape(-1)
            grad_vertices = _stroke_grad(cache, d_cov)
            grad[l] = bern.T @ grad_vertices
        return grad

    return vjp


def _rasterize_vjp_fast(pts, canvas_hw, width_px, softness_px, segments):
    """Unchecked rasterize + vjp for trusted in-loop callers."""
    h, w = canvas_hw
    values, fields, bern = _raster_core(pts, h, w, width_px, softness_px,
                                        segments, want_fields=True)
    cov_map = CoverageMap(values=values, width_px=width_px,
                          softness_px=softness_px)
    return cov_map, _make_vjp(pts, h, w, fields, bern)


def _rasterize_vjp_windows(pts, canvas_hw, width_px, softness_px, segments):
    """As _rasterize_vjp_fast, plus each curve's pixel window (or None)."""
    h, w = canvas_hw
    values, fields, bern = _raster_core(pts, h, w, width_px, softness_px,
                                        segments, want_fields=True)
    cov_map = CoverageMap(values=values, width_px=width_px,
                          softness_px=softness_px)
    windows = [f[0] if f is not None else None for f in fields]
    return cov_map, _make_vjp(pts, h, w, fields, bern), windows


def _rasterize_fast(pts, canvas_hw, width_px, softness_px, segments):
    """Unchecked coverage-only rasterize for trusted in-loop callers."""
    h, w = canvas_hw
    values, _, _ = _raster_core(pts, h, w, width_px, softness_px, segments,
                                want_fields=False)
    return CoverageMap(values=values, width_px=width_px,
                       softness_px=softness_px)


def rasterize_vjp(points, canvas_hw, width_px=DEFAULT_WIDTH_PX,
                  softness_px=DEFAULT_SOFTNESS_PX, segments=DEFAULT_SEGMENTS):
    """Rasterize curves and return (CoverageMap, vjp).

    vjp(upstream) computes the gradient of sum(upstream * coverage)
    w.r.t. the (L, N, 2) control points.
    """
    pts = check_control_points(points, canvas_hw=canvas_hw)
    h, w = check_canvas(canvas_hw)
    check_positive(width_px, "width_px")
    check_positive(softness_px, "softness_px")
    return _rasterize_vjp_fast(pts, (h, w), width_px, softness_px, segments)


def rasterize(points, canvas_hw, width_px=DEFAULT_WIDTH_PX,
              softness_px=DEFAULT_SOFTNESS_PX, segments=DEFAULT_SEGMENTS):
    """Coverage map of (L, N, 2) control points on an H x W canvas."""
    pts = check_control_points(points, canvas_hw=canvas_hw)
    h, w = check_canvas(canvas_hw)
    check_positive(width_px, "width_px")
    check_positive(softness_px, "softness_px")
    return _rasterize_fast(pts, (h, w), width_px, softness_px, segments)


def backprop_raster(points, canvas_hw, width_px, softness_px, upstream,
                    segments=DEFAULT_SEGMENTS):
    """Gradient of sum(upstream * coverage) w.r.t. the control points."""
    _, vjp = rasterize_vjp(points, canvas_hw, width_px, softness_px, segments)
    return vjp(upstream)
