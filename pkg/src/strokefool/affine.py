"""Random small affine transforms applied to stroke control points.

Simulates the misalignment a human introduces when tracing a reference
doodle: rotation and scaling about the canvas center plus a fractional
translation.  Transforms act on control points only, never on the
underlying image; because a bezier curve is an affine combination of its
control points, transforming the points is equivalent to warping the
rendered stroke.  Stroke width is not scaled (pens have fixed width).
"""

import math
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class EotConfig:
    """Ranges of the misalignment distribution; all draws are uniform."""

    max_rot_deg: float = 5.0
    max_trans_frac: float = 0.02
    min_scale: float = 0.97
    max_scale: float = 1.03
    rng_seed: int | None = None

    def __post_init__(self):
        if self.max_rot_deg < 0:
            raise ValueError("max_rot_deg must be >= 0")
        if not 0 <= self.max_trans_frac < 0.5:
            raise ValueError("max_trans_frac must lie in [0, 0.5)")
        if not 0 < self.min_scale <= 1 <= self.max_scale:
            raise ValueError("need 0 < min_scale <= 1 <= max_scale")

    @staticmethod
    def identity():
        """A degenerate distribution whose every draw is the identity."""
        return EotConfig(max_rot_deg=0.0, max_trans_frac=0.0,
                         min_scale=1.0, max_scale=1.0)

    def widened(self, factor):
        """Ranges scaled by ``factor`` (e.g. the replication-error model)."""
        return EotConfig(
            max_rot_deg=self.max_rot_deg * factor,
            max_trans_frac=min(self.max_trans_frac * factor, 0.499),
            min_scale=max(1.0 - factor * (1.0 - self.min_scale), 1e-3),
            max_scale=1.0 + factor * (self.max_scale - 1.0),
        )


@dataclass(frozen=True)
class AffineParams:
    """One concrete draw: p' = scale * R(rot) (p - center) + center + trans."""

    rotation_deg: float
    translate_frac: tuple  # (dx, dy) as fractions of (W, H)
    scale: float
    center: tuple          # canvas center (x, y) in pixels
    canvas_hw: tuple       # (H, W) the params were drawn for

    @property
    def is_identity(self):
        return (self.rotation_deg == 0.0 and self.scale == 1.0
                and self.translate_frac == (0.0, 0.0))


def identity_params(canvas_hw):
    h, w = canvas_hw
    return AffineParams(rotation_deg=0.0, translate_frac=(0.0, 0.0),
                        scale=1.0, center=(w / 2.0, h / 2.0),
                        canvas_hw=(h, w))


def sample_affine(cfg, canvas_hw, rng):
    """Draw AffineParams uniformly from the config's ranges.

    Always consumes exactly four uniforms (rotation, dx, dy, scale), so a
    seeded stream stays aligned whatever the ranges are.
    """
    h, w = canvas_hw
    rot = rng.uniform(-cfg.max_rot_deg, cfg.max_rot_deg)
    dx = rng.uniform(-cfg.max_trans_frac, cfg.max_trans_frac)
    dy = rng.uniform(-cfg.max_trans_frac, cfg.max_trans_frac)
    scale = rng.uniform(cfg.min_scale, cfg.max_scale)
    return AffineParams(rotation_deg=rot, translate_frac=(dx, dy),
                        scale=scale, center=(w / 2.0, h / 2.0),
                        canvas_hw=(h, w))


def affine_matrix(t):
    """Linear part A (2x2) and offset b so that p' = p @ A.T + b."""
    theta = math.radians(t.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    a = t.scale * np.array([[c, -s], [s, c]])
    center = np.asarray(t.center)
    h, w = t.canvas_hw
    trans = np.array([t.translate_frac[0] * w, t.translate_frac[1] * h])
    b = center + trans - a @ center
    return a, b


def apply_affine(points, t):
    """Map every control point through the transform; shape is preserved."""
    pts = np.asarray(points, dtype=np.float64)
    if t.is_identity:
        return pts.copy()
    a, b = affine_matrix(t)
    return pts @ a.T + b


def invert_affine(t):
    """Exact closed-form inverse draw (same center, reciprocal scale)."""
    h, w = t.canvas_hw
    theta = math.radians(-t.rotation_deg)
    c, s = math.cos(theta), math.sin(theta)
    rinv = np.array([[c, -s], [s, c]]) / t.scale
    trans = np.array([t.translate_frac[0] * w, t.translate_frac[1] * h])
    new_trans = -(rinv @ trans)
    return AffineParams(
        rotation_deg=-t.rotation_deg,
        translate_frac=(new_trans[0] / w, new_trans[1] / h),
        scale=1.0 / t.scale,
        center=t.center,
        canvas_hw=t.canvas_hw,
    )


def transform_gradient(grad_transformed, t):
    """Pull a gradient w.r.t. transformed points back to the originals.

    The map is linear with matrix A per point, so the chain rule is a
    multiplication by A^T.
    """
    grad = np.asarray(grad_transformed, dtype=np.float64)
    if t.is_identity:
        return grad.copy()
    a, _ = affine_matrix(t)
    return grad @ a
