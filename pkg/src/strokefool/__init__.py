"""Stroke-based adversarial attacks: optimize black bezier curves that
keep fooling a classifier when a human redraws them."""

from .affine import AffineParams, EotConfig, apply_affine, sample_affine
from .attack import (AttackConfig, AttackRecord, DoodleAttack, attack_loss,
                     batch_attack, init_control_points, regularized_loss,
                     run_attack, validate)
from .bezier import Polyline, bezier_jacobian, evaluate_bezier, flatten
from .classifier import (PreprocessSpec, TinyConvNet, load_model, preprocess,
                         save_model)
from .compose import backprop_doodle, doodle, overlay
from .raster import (CoverageMap, backprop_raster, doodle_size, hard_mask,
                     rasterize, rasterize_polylines)

__all__ = [
    "AffineParams", "AttackConfig", "AttackRecord", "CoverageMap",
    "DoodleAttack", "EotConfig", "Polyline", "PreprocessSpec", "TinyConvNet",
    "apply_affine", "attack_loss", "backprop_doodle", "backprop_raster",
    "batch_attack", "bezier_jacobian", "doodle", "doodle_size",
    "evaluate_bezier", "flatten", "hard_mask", "init_control_points",
    "load_model", "overlay", "preprocess", "rasterize",
    "rasterize_polylines", "regularized_loss", "run_attack", "sample_affine",
    "save_model", "validate",
]
