"""Two-phase stroke-attack optimization.

Given a classifier, an image, and its true class s, optimize the control
points V of L black curves so the doodled image is misclassified under
every small random affine misalignment of the strokes.  Each iteration:

  1. training phase: average the loss log f_s(doodle(X, V; t_b)) over a
     fresh batch of transform draws and take one Adam step on V; once a
     validated attack exists, an L1 size term (mean soft coverage) joins
     the loss so the doodle shrinks;
  2. validation phase: the updated V passes when a fresh batch of draws
     all misclassify; the smallest validated doodle (hard-mask area at
     threshold 0.5) is kept as the result.

If no iteration ever validates, V is re-initialized, up to a fixed
number of trials.  Everything is deterministic for a fixed seed.
"""

import math
from dataclasses import dataclass, field, replace

import numpy as np
from sklearn.base import BaseEstimator

from . import raster
from .affine import EotConfig, apply_affine, sample_affine, transform_gradient
from .compose import backprop_doodle, overlay
from .errors import InputError, NumericError
from .net import AdamState, adam_step, softmax
from .validation import check_image

LOG_CLAMP = 1e-12


@dataclass(frozen=True)
class AttackConfig:
    """Hyperparameters of the optimization.

    curves/points_per_curve are the doodle's shape (L, N); batch is the
    number of transform draws per phase; size_weight is the L1
    coefficient.  Learning rate 1 with batch 10 and size weight 1 are
    the reference settings.
    """

    curves: int = 3
    points_per_curve: int = 4
    width_px: float = raster.DEFAULT_WIDTH_PX
    softness_px: float = raster.DEFAULT_SOFTNESS_PX
    batch: int = 10
    iterations: int = 10_000
    size_weight: float = 1.0
    lr: float = 1.0
    eot: EotConfig = field(default_factory=EotConfig)
    max_restarts: int = 3
    seed: int = 0
    segments: int = raster.DEFAULT_SEGMENTS

    def __post_init__(self):
        if self.batch < 1 or self.iterations < 1 or self.max_restarts < 1:
            raise ValueError("batch, iterations, max_restarts must be >= 1")
        if self.size_weight < 0:
            raise ValueError("size_weight must be >= 0")
        if self.curves < 1 or self.points_per_curve < 2:
            raise ValueError("need curves >= 1 and points_per_curve >= 2")

    def to_dict(self):
        d = {k: getattr(self, k) for k in (
            "curves", "points_per_curve", "width_px", "softness_px", "batch",
            "iterations", "size_weight", "lr", "max_restarts", "seed",
            "segments")}
        d["eot"] = {"max_rot_deg": self.eot.max_rot_deg,
                    "max_trans_frac": self.eot.max_trans_frac,
                    "min_scale": self.eot.min_scale,
                    "max_scale": self.eot.max_scale}
        return d

    @staticmethod
    def from_dict(d):
        d = dict(d)
        eot = d.pop("eot", None)
        cfg = AttackConfig(**d)
        if eot is not None:
            cfg = replace(cfg, eot=EotConfig(**eot))
        return cfg


@dataclass
class IterationEntry:
    trial: int
    iteration: int
    loss: float
    f_s: float
    soft_size: float
    validation_passed: bool
    size_term_active: bool
    hard_size: float = math.nan    # set on validation passes
    s_min_after: float = math.inf


@dataclass
class AttackRecord:
    """Outcome of one optimization run."""

    success: bool
    s_min: float
    best_points: np.ndarray | None
    best_points_norm: np.ndarray | None
    canvas_hw: tuple
    label: int
    seed: int
    restarts_used: int
    phase2_entered_at: int | None
    iteration_log: list


def init_control_points(cfg, canvas_hw, rng):
    """Random initial strokes: one local cluster inside the central 60% box.

    A doodle anchor is drawn uniformly over the central box; every point
    lands uniformly in the intersection of the box with a window of
    half-width 20% of the canvas around the anchor.  That caps every
    span at 40% of the canvas, keeps the initial strokes local and
    on-canvas, and leaves the ensemble mean at the canvas center.
    """
    h, w = canvas_hw
    extent = np.array([w, h], dtype=np.float64)
    lo, hi = 0.2 * extent, 0.8 * extent
    reach = 0.2 * extent
    anchor = rng.uniform(lo, hi)
    box_lo = np.maximum(lo, anchor - reach)
    box_hi = np.minimum(hi, anchor + reach)
    return rng.uniform(box_lo, box_hi,
                       size=(cfg.curves, cfg.points_per_curve, 2))


def _merge_rects(window_lists, canvas_hw, step=8):
    """Per-curve unions of the rasterizer's field windows across draws,
    rounded up to multiples of ``step`` so downstream buffers recycle."""
    h, w = canvas_hw
    rects = []
    n_curves = len(window_lists[0])
    for l in range(n_curves):
        wins = [wl[l] for wl in window_lists if wl[l] is not None]
        if not wins:
            rects.append(None)  # off-canvas curve: no influence, no gradient
            continue
        h0 = min(win[0] for win in wins)
        h1 = max(win[1] for win in wins)
        w0 = min(win[2] for win in wins)
        w1 = max(win[3] for win in wins)
        hh = min(h, -(-(h1 - h0) // step) * step)
        ww = min(w, -(-(w1 - w0) // step) * step)
        h0 = max(0, min(h0, h - hh))
        w0 = max(0, min(w0, w - ww))
        rects.append((h0, h0 + hh, w0, w0 + ww))
    return rects


def _doodle_batch(image, points, draws, cfg, with_grads):
    """Composites for each transform draw, plus per-draw raster VJPs and
    per-curve influence rects."""
    h, w = image.shape[:2]
    composites = np.empty((len(draws), h, w, 3), dtype=np.float32)
    vjps = []
    window_lists = []
    for b, t in enumerate(draws):
        moved = apply_affine(points, t)
        if with_grads:
            cov, vjp, windows = raster._rasterize_vjp_windows(
                moved, (h, w), cfg.width_px, cfg.softness_px, cfg.segments)
            vjps.append(vjp)
            window_lists.append(windows)
        else:
            cov = raster._rasterize_fast(moved, (h, w), cfg.width_px,
                                         cfg.softness_px, cfg.segments)
        composites[b] = overlay(image, cov)
    rects = _merge_rects(window_lists, (h, w)) if with_grads else None
    return composites, vjps, rects


def _loss_over_draws(model, image, class_idx, points, draws, cfg, ev=None,
                     scratch=None):
    """(mean log f_s, gradient w.r.t. points, mean f_s) for fixed draws.

    With a PatchedEvaluator ``ev``, the input gradient is computed only
    on the window the strokes can touch; the raster VJP never reads it
    anywhere else.
    """
    composites, vjps, rects = _doodle_batch(image, points, draws, cfg,
                                            with_grads=True)
    h, w = image.shape[:2]
    live = [r for r in rects if r is not None]
    # windowed backward wins only while the strokes stay compact; curves
    # that wander across the canvas are cheaper through the full pass
    total_area = sum((r[1] - r[0]) * (r[3] - r[2]) for r in live)
    if ev is not None and live and total_area <= 0.5 * h * w:
        patches, f_s = ev.input_gradient(composites, class_idx, live)
        upstream = scratch if scratch is not None else np.zeros((h, w))
        grad = np.zeros_like(points)
        for b, (t, vjp) in enumerate(zip(draws, vjps)):
            for d_win, (h0, h1, w0, w1) in patches:
                upstream[h0:h1, w0:w1] = backprop_doodle(
                    np.asarray(d_win[b], dtype=np.float64),
                    image[h0:h1, w0:w1], None)
            grad += transform_gradient(vjp(upstream), t)
        for _, (h0, h1, w0, w1) in patches:
            upstream[h0:h1, w0:w1] = 0.0
    else:
        d_inputs, f_s = model.net_.input_gradient(composites, class_idx)
        grad = np.zeros_like(points)
        for b, (t, vjp) in enumerate(zip(draws, vjps)):
            d_cov = backprop_doodle(np.asarray(d_inputs[b], dtype=np.float64),
                                    image, None)
            grad += transform_gradient(vjp(d_cov), t)
    loss = float(np.mean(np.log(np.maximum(f_s, LOG_CLAMP))))
    grad /= len(draws)
    return loss, grad, float(np.mean(f_s))


def attack_loss(model, image, label, points, eot_cfg, batch, rng,
                width_px=raster.DEFAULT_WIDTH_PX,
                softness_px=raster.DEFAULT_SOFTNESS_PX,
                segments=raster.DEFAULT_SEGMENTS):
    """Mean log f_s over ``batch`` fresh draws and its gradient w.r.t. V."""
    image = check_image(image)
    cfg = AttackConfig(curves=np.asarray(points).shape[0],
                       points_per_curve=np.asarray(points).shape[1],
                       width_px=width_px, softness_px=softness_px,
                       batch=batch, eot=eot_cfg, segments=segments)
    draws = [sample_affine(eot_cfg, image.shape[:2], rng) for _ in range(batch)]
    loss, grad, _ = _loss_over_draws(model, image, model.class_index(label),
                                     points, draws, cfg)
    if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
        raise NumericError("attack loss diverged")
    return loss, grad


def regularized_loss(base_loss, points, size_weight, phase2, canvas_hw,
                     width_px=raster.DEFAULT_WIDTH_PX,
                     softness_px=raster.DEFAULT_SOFTNESS_PX,
                     segments=raster.DEFAULT_SEGMENTS):
    """Add the doodled-area term once the shrinking phase is active."""
    if not phase2:
        return float(base_loss)
    cov = raster.rasterize(points, canvas_hw, width_px, softness_px, segments)
    return float(base_loss + size_weight * raster.doodle_size(cov, "soft"))


def _misclassifies_all(model, image, class_idx, points, draws, cfg,
                       expect_pass=False, ev=None):
    """True iff every draw's composite is classified away from class_idx.

    Draws are always sampled up front by the caller, so RNG consumption
    never depends on the outcome.  Evaluation order adapts: while the
    attack usually fails, the first draw alone settles it cheaply; once
    passes are expected, one batched forward is faster.
    """
    h, w = image.shape[:2]
    if expect_pass:
        composites, _, _ = _doodle_batch(image, points, draws, cfg,
                                         with_grads=False)
        proba = model.net_.predict_proba(composites)
        return not np.any(np.argmax(proba, axis=1) == class_idx)
    for t in draws[:1]:
        moved = apply_affine(points, t)
        cov = raster._rasterize_fast(moved, (h, w), cfg.width_px,
                                     cfg.softness_px, cfg.segments)
        proba = model.net_.predict_proba(
            overlay(image, cov)[np.newaxis].astype(np.float32))
        if int(np.argmax(proba[0])) == class_idx:
            return False
    if len(draws) > 1:
        composites, _, _ = _doodle_batch(image, points, draws[1:], cfg,
                                         with_grads=False)
        proba = model.net_.predict_proba(composites)
        if np.any(np.argmax(proba, axis=1) == class_idx):
            return False
    return True


def validate(model, image, label, points, eot_cfg, batch, rng,
             width_px=raster.DEFAULT_WIDTH_PX,
             softness_px=raster.DEFAULT_SOFTNESS_PX,
             segments=raster.DEFAULT_SEGMENTS):
    """True iff ``batch`` fresh draws all lead to misclassification."""
    image = check_image(image)
    cfg = AttackConfig(width_px=width_px, softness_px=softness_px,
                       batch=batch, eot=eot_cfg, segments=segments)
    draws = [sample_affine(eot_cfg, image.shape[:2], rng) for _ in range(batch)]
    return _misclassifies_all(model, image, model.class_index(label),
                              points, draws, cfg)


def run_attack(model, image, label, cfg, rng=None):
    """Full optimization with restart policy; never raises on failure.

    The caller is responsible for only attacking images the model
    classifies correctly.  Numeric blow-ups consume a trial; if no trial
    validates within the iteration budget, the record reports failure.
    """
    image = check_image(image)
    h, w = image.shape[:2]
    extent = np.array([w, h], dtype=np.float64)
    class_idx = model.class_index(label)
    if rng is None:
        rng = np.random.default_rng(cfg.seed)

    s_min = math.inf
    best = None
    best_norm = None
    phase2_at = None
    log = []
    trials = 0
    ones_hw = np.full((h, w), 1.0 / (h * w))
    scratch = np.zeros((h, w))
    try:
        from .net import WindowedGradient

        evaluator = WindowedGradient(model.net_)
    except (ValueError, AttributeError):
        evaluator = None  # stub models and unusual stacks take the full path

    for trial in range(1, cfg.max_restarts + 1):
        trials = trial
        points = init_control_points(cfg, (h, w), rng)
        adam = AdamState.like(points)
        cov_pre, vjp_pre = raster._rasterize_vjp_fast(
            points, (h, w), cfg.width_px, cfg.softness_px, cfg.segments)
        aborted = False

        for iteration in range(1, cfg.iterations + 1):
            draws = [sample_affine(cfg.eot, (h, w), rng)
                     for _ in range(cfg.batch)]
            loss, grad, f_s_mean = _loss_over_draws(
                model, image, class_idx, points, draws, cfg,
                ev=evaluator, scratch=scratch)
            size_active = s_min != math.inf
            soft_size = float(cov_pre.values.mean())
            if size_active:
                loss += cfg.size_weight * soft_size
                grad = grad + cfg.size_weight * vjp_pre(ones_hw)
            if not (np.isfinite(loss) and np.all(np.isfinite(grad))):
                aborted = True
                break

            points, adam = adam_step(points, grad, adam, cfg.lr)
            if not np.all(np.isfinite(points)) or \
                    np.any(np.abs(points) > 4.0 * max(h, w)):
                aborted = True
                break
            cov_pre, vjp_pre = raster._rasterize_vjp_fast(
                points, (h, w), cfg.width_px, cfg.softness_px, cfg.segments)

            val_draws = [sample_affine(cfg.eot, (h, w), rng)
                         for _ in range(cfg.batch)]
            passed = _misclassifies_all(model, image, class_idx, points,
                                        val_draws, cfg,
                                        expect_pass=size_active, ev=evaluator)
            entry = IterationEntry(trial=trial, iteration=iteration,
                                   loss=loss, f_s=f_s_mean,
                                   soft_size=soft_size,
                                   validation_passed=passed,
                                   size_term_active=size_active)
            if passed:
                if phase2_at is None:
                    phase2_at = iteration + 1
                norm = points / extent
                snapped = norm * extent
                cov_snap = raster._rasterize_fast(snapped, (h, w), cfg.width_px,
                                                  cfg.softness_px, cfg.segments)
                hard = raster.doodle_size(cov_snap, "hard")
                entry.hard_size = hard
                if hard <= s_min:
                    s_min = hard
                    best = snapped
                    best_norm = norm
            entry.s_min_after = s_min
            log.append(entry)

        if s_min != math.inf:
            break  # this trial produced a validated attack; no restart
        phase2_at = None
        if aborted:
            continue

    return AttackRecord(success=s_min != math.inf, s_min=s_min,
                        best_points=best, best_points_norm=best_norm,
                        canvas_hw=(h, w), label=int(label), seed=cfg.seed,
                        restarts_used=trials, phase2_entered_at=phase2_at,
                        iteration_log=log)


def image_rng(seed, image_index):
    """Independent, order-free stream for one image of a batch run."""
    return np.random.default_rng(np.random.SeedSequence((seed, image_index)))


def batch_attack(model, images, labels, cfg, progress=None):
    """run_attack over many images with per-image derived seeds."""
    records = []
    for i, (image, label) in enumerate(zip(images, labels)):
        record = run_attack(model, image, label, cfg, rng=image_rng(cfg.seed, i))
        records.append(record)
        if progress is not None:
            progress(i, record)
    return records


class DoodleAttack(BaseEstimator):
    """Estimator-style wrapper: fit(image, label) optimizes the strokes.

    After fit: ``record_`` (full AttackRecord), ``best_points_``,
    ``s_min_``, ``success_``.
    """

    def __init__(self, model=None, config=None):
        self.model = model
        self.config = config

    def fit(self, image, label):
        if self.model is None:
            raise InputError("DoodleAttack needs a fitted classifier")
        cfg = self.config if self.config is not None else AttackConfig()
        self.record_ = run_attack(self.model, image, label, cfg)
        self.best_points_ = self.record_.best_points
        self.s_min_ = self.record_.s_min
        self.success_ = self.record_.success
        return self

    def doodled(self, image, t=None):
        """The attacked image under transform ``t`` (identity when None)."""
        from .affine import identity_params

        if self.best_points_ is None:
            raise InputError("no successful attack to apply")
        h, w = image.shape[:2]
        t = t if t is not None else identity_params((h, w))
        cfg = self.config if self.config is not None else AttackConfig()
        moved = apply_affine(self.best_points_, t)
        cov = raster.rasterize(moved, (h, w), cfg.width_px, cfg.softness_px,
                               cfg.segments)
        return overlay(image, cov)
