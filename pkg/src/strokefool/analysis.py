"""Post-hoc analysis: saliency maps, attack transferability, and the
misalignment-robustness ablation."""

import math
from dataclasses import dataclass

import numpy as np

from . import raster
from .affine import apply_affine, sample_affine
from .attack import image_rng, run_attack
from .classifier import bilinear_resize
from .compose import overlay
from .errors import InputError


# ---------------------------------------------------------------------------
# GradCAM
# ---------------------------------------------------------------------------

@dataclass
class SaliencyMap:
    """Non-negative class-evidence map, normalized to max 1 when nonzero."""

    values: np.ndarray      # (H', W') at the conv layer's resolution
    target_layer: str
    upsampled: np.ndarray   # (H, W) bilinear overlay version


def gradcam(model, image, class_label, layer=None):
    """Gradient-weighted class activation map at a conv layer.

    Channel weights are the spatial mean of d(pre-softmax score)/d(activation);
    the map is ReLU(sum_c weight_c * activation_c), max-normalized, then
    upsampled to the input size.
    """
    net = model.net_
    if layer is None:
        layer = net.conv_layer_names()[-1]
    class_idx = model.class_index(class_label)
    act, grad = net.activation_gradient(image[np.newaxis], class_idx, layer)
    weights = grad[0].mean(axis=(0, 1))                   # (C,)
    cam = np.maximum((act[0] * weights).sum(axis=-1), 0.0)
    peak = cam.max()
    if peak > 0:
        cam = cam / peak
    upsampled = bilinear_resize(cam[:, :, np.newaxis].astype(np.float64),
                                net.input_size, net.input_size)[:, :, 0]
    return SaliencyMap(values=cam.astype(np.float64), target_layer=layer,
                       upsampled=upsampled)


def saliency_shift(map_a, map_b):
    """1 - cosine similarity of two maps: 0 identical, 1 disjoint.

    Returns NaN when either map is all-zero (the shift is undefined).
    """
    a = (map_a.values if isinstance(map_a, SaliencyMap) else np.asarray(map_a)).ravel()
    b = (map_b.values if isinstance(map_b, SaliencyMap) else np.asarray(map_b)).ravel()
    if a.shape != b.shape:
        raise InputError("saliency maps must have the same shape")
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0.0 or nb == 0.0:
        return math.nan
    return float(1.0 - float(a @ b) / (na * nb))


# ---------------------------------------------------------------------------
# Transferability
# ---------------------------------------------------------------------------

@dataclass
class TransferReport:
    source_arch: str
    target_arch: str
    curves: int
    eot_enabled: bool
    n_total: int
    n_success: int

    @property
    def score(self):
        return self.n_success / self.n_total if self.n_total else math.nan

    @property
    def defined(self):
        return self.n_total > 0


def transfer_eval(attacks, source_model, target_model, eot_enabled=True,
                  width_px=raster.DEFAULT_WIDTH_PX,
                  softness_px=raster.DEFAULT_SOFTNESS_PX):
    """Score source-tuned attacks against a different target classifier.

    ``attacks`` is a sequence of (record, image, label) triples from the
    source model's run.  Filtering: keep source-successful attacks, drop
    images the target misclassifies even when clean, then count how many
    doodled images the target gets wrong.  The strokes are applied
    exactly as optimized (identity transform).
    """
    if not np.array_equal(source_model.classes_, target_model.classes_):
        raise InputError("source and target must share the class vocabulary")
    n_total = 0
    n_success = 0
    curves = 0
    for record, image, label in attacks:
        if not record.success:
            continue
        curves = record.best_points.shape[0]
        if int(target_model.predict(image[np.newaxis])[0]) != int(label):
            continue
        n_total += 1
        cov = raster.rasterize(record.best_points, image.shape[:2],
                               width_px, softness_px)
        pred = int(target_model.predict(overlay(image, cov)[np.newaxis])[0])
        if pred != int(label):
            n_success += 1
    return TransferReport(
        source_arch=source_model.arch_id,
        target_arch=target_model.arch_id,
        curves=curves, eot_enabled=eot_enabled,
        n_total=n_total, n_success=n_success)


# ---------------------------------------------------------------------------
# Simulated replication and the misalignment ablation
# ---------------------------------------------------------------------------

REPLICATION_WIDEN = 2.0
REPLICATION_JITTER_PX = 0.5
REPLICATION_DRAWS = 3


def simulated_replication(model, image, label, points, eot_cfg, rng,
                          draws=REPLICATION_DRAWS,
                          width_px=raster.DEFAULT_WIDTH_PX,
                          softness_px=raster.DEFAULT_SOFTNESS_PX):
    """Headless stand-in for a human tracing the reference strokes.

    Each draw perturbs the strokes by a transform from a distribution
    twice as wide as the training one plus per-point jitter, then checks
    misclassification; the replication counts as successful when the
    majority of draws fool the model.
    """
    h, w = image.shape[:2]
    wide = eot_cfg.widened(REPLICATION_WIDEN)
    class_idx = model.class_index(label)
    fooled = 0
    for _ in range(draws):
        t = sample_affine(wide, (h, w), rng)
        moved = apply_affine(points, t)
        moved = moved + rng.normal(scale=REPLICATION_JITTER_PX,
                                   size=moved.shape)
        cov = raster.rasterize(moved, (h, w), width_px, softness_px)
        proba = model.net_.predict_proba(overlay(image, cov)[np.newaxis])
        if int(np.argmax(proba[0])) != class_idx:
            fooled += 1
    return fooled * 2 > draws


@dataclass
class AblationArm:
    name: str
    eot_enabled: bool
    computer_successes: int
    replication_successes: int
    records: list


@dataclass
class AblationReport:
    arms: list
    n_images: int

    def arm(self, name):
        return next(a for a in self.arms if a.name == name)


def ablation_run(images, labels, model, cfg_on, cfg_off, replication_seed=0):
    """Attack the same images under both configs and compare outcomes.

    Per-image RNG streams derive from (config seed, image index), so two
    arms with equal seeds see identical initializations; the replication
    draws come from an independent stream.
    """
    report = AblationReport(arms=[], n_images=len(images))
    for arm_index, (name, cfg) in enumerate((("eot-on", cfg_on),
                                             ("eot-off", cfg_off))):
        ranges = (cfg.eot.max_rot_deg, cfg.eot.max_trans_frac,
                  cfg.eot.min_scale, cfg.eot.max_scale)
        eot_enabled = ranges != (0.0, 0.0, 1.0, 1.0)
        records = []
        computer = 0
        replicated = 0
        rep_rng = np.random.default_rng(
            np.random.SeedSequence((replication_seed, arm_index)))
        for i, (image, label) in enumerate(zip(images, labels)):
            record = run_attack(model, image, int(label), cfg,
                                rng=image_rng(cfg.seed, i))
            records.append(record)
            if record.success:
                computer += 1
                # the replication error model is the *reference* distribution
                # widened, identical for both arms
                if simulated_replication(model, image, int(label),
                                         record.best_points, cfg_on.eot,
                                         rep_rng):
                    replicated += 1
        report.arms.append(AblationArm(name=name, eot_enabled=eot_enabled,
                                       computer_successes=computer,
                                       replication_successes=replicated,
                                       records=records))
    return report
