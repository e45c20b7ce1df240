import numpy as np
import pytest

from strokefool.affine import identity_params
from strokefool.compose import backprop_doodle, doodle, overlay
from strokefool.raster import CoverageMap, hard_mask, rasterize


def test_offcanvas_strokes_leave_image_untouched():
    rng = np.random.default_rng(0)
    image = rng.uniform(size=(16, 16, 3))
    pts = np.full((1, 4, 2), 50.0)  # off-canvas, within the sanity bound
    out = doodle(image, pts, identity_params((16, 16)))
    np.testing.assert_array_equal(out, image)


def test_full_coverage_paints_black():
    image = np.random.default_rng(1).uniform(size=(8, 8, 3))
    cov = CoverageMap(np.ones((8, 8)), 1.5, 0.25)
    np.testing.assert_array_equal(overlay(image, cov), np.zeros((8, 8, 3)))


def test_half_coverage_scales_channels():
    image = np.zeros((8, 8, 3))
    image[2, 3] = [0.8, 0.6, 0.4]
    cov = np.zeros((8, 8))
    cov[2, 3] = 0.5
    out = overlay(image, cov)
    np.testing.assert_allclose(out[2, 3], [0.4, 0.3, 0.2], atol=1e-15)


def test_shape_mismatch_rejected():
    with pytest.raises(ValueError):
        overlay(np.zeros((8, 8, 3)), np.zeros((9, 8)))


def test_output_stays_in_unit_range_and_monotone():
    rng = np.random.default_rng(2)
    image = rng.uniform(size=(16, 16, 3))
    pts = rng.uniform(2, 14, size=(2, 4, 2))
    out = doodle(image, pts, identity_params((16, 16)))
    assert out.min() >= 0.0 and out.max() <= 1.0
    cov = rasterize(pts, (16, 16)).values
    more = overlay(image, np.clip(cov + 0.1, 0, 1))
    assert np.all(more <= out + 1e-15)


def test_backprop_doodle_zero_upstream():
    image = np.random.default_rng(3).uniform(size=(8, 8, 3))
    np.testing.assert_array_equal(
        backprop_doodle(np.zeros((8, 8, 3)), image, np.zeros((8, 8))),
        np.zeros((8, 8)))


def test_backprop_doodle_hand_oracle():
    # out = X (1 - cov); d out/d cov = -X; all-ones X and upstream -> -3
    grad = backprop_doodle(np.ones((4, 4, 3)), np.ones((4, 4, 3)), np.zeros((4, 4)))
    np.testing.assert_array_equal(grad, np.full((4, 4), -3.0))


def test_black_image_blocks_gradient():
    grad = backprop_doodle(np.ones((4, 4, 3)), np.zeros((4, 4, 3)), np.zeros((4, 4)))
    np.testing.assert_array_equal(grad, np.zeros((4, 4)))


def test_small_softness_approaches_hard_overlay():
    rng = np.random.default_rng(4)
    image = rng.uniform(0.2, 1.0, size=(32, 32, 3))
    pts = rng.uniform(6, 26, size=(1, 4, 2))
    soft = doodle(image, pts, identity_params((32, 32)), width_px=1.5, softness_px=0.05)
    cov = rasterize(pts, (32, 32), width_px=1.5, softness_px=0.05)
    mask = hard_mask(cov)
    hard = image * (1.0 - mask[:, :, None])
    # agree except inside the narrow transition band
    band = np.abs(cov.values - 0.5) < 0.49
    outside = ~band
    assert np.abs(soft - hard)[outside].max() < 0.1
