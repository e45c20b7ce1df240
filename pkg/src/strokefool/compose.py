"""Overlaying black strokes onto an image.

The doodled image is X * (1 - coverage), the same coverage factor applied
to each color channel: fully covered pixels go black, uncovered pixels
are untouched, soft edges darken proportionally.
"""

import numpy as np

from . import raster
from .affine import apply_affine
from .validation import check_image


def overlay(image, cov):
    """Multiply an (H, W, 3) image by (1 - coverage), channel-shared."""
    values = cov.values if isinstance(cov, raster.CoverageMap) else np.asarray(cov)
    image = np.asarray(image, dtype=np.float64)
    if image.shape[:2] != values.shape:
        raise ValueError(
            f"image {image.shape[:2]} and coverage {values.shape} disagree")
    return image * (1.0 - values)[:, :, np.newaxis]


def doodle(image, points, t, width_px=raster.DEFAULT_WIDTH_PX,
           softness_px=raster.DEFAULT_SOFTNESS_PX,
           segments=raster.DEFAULT_SEGMENTS):
    """Draw transformed strokes onto the image.

    The transform t acts on the control points only; the image itself is
    never warped.
    """
    image = check_image(image)
    cov = raster.rasterize(apply_affine(points, t), image.shape[:2],
                           width_px, softness_px, segments)
    return overlay(image, cov)


def backprop_doodle(upstream, image, cov=None):
    """Gradient of the overlay w.r.t. coverage: -(upstream * X) summed over channels."""
    upstream = np.asarray(upstream, dtype=np.float64)
    image = np.asarray(image, dtype=np.float64)
    if upstream.shape != image.shape:
        raise ValueError("upstream must match the image shape")
    return -(upstream * image).sum(axis=2)
