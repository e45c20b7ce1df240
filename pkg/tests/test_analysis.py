import math

import numpy as np
import pytest

from strokefool.analysis import (AblationReport, SaliencyMap, TransferReport,
                                 ablation_run, gradcam, saliency_shift,
                                 simulated_replication, transfer_eval)
from strokefool.attack import AttackConfig, AttackRecord
from strokefool.classifier import TinyConvNet, build_network
from strokefool.net import Conv2D, Dense, GlobalAvgPool, Network


def toy_cam_model(seed=0, class_count=3, size=8):
    """conv + GAP + linear head; GradCAM has a closed form here."""
    rng = np.random.default_rng(seed)
    layers = [("conv1", Conv2D(3, 4, 3, rng, np.float64)),
              ("gap", GlobalAvgPool()),
              ("head", Dense(4, class_count, rng, np.float64))]
    model = TinyConvNet(arch="cnn-a", input_size=size)
    model.classes_ = np.arange(1, class_count + 1)
    model.net_ = Network(layers, "toy", size, class_count, np.float64)
    return model


def test_gradcam_matches_closed_form():
    # logit_k = sum_c W[c,k] * mean(A_c) + b, so the channel weight is
    # W[c,k] / (h*w) and the map is ReLU(sum_c W[c,k] A_c) normalized
    model = toy_cam_model()
    rng = np.random.default_rng(1)
    image = rng.uniform(size=(8, 8, 3))
    k = 2
    sal = gradcam(model, image, class_label=k, layer="conv1")
    net = model.net_
    act = net.layer("conv1").forward(net._check_input(image[np.newaxis]))[0]
    w = net.layer("head").weights[:, model.class_index(k)]
    cam = np.maximum((act * (w / act[:, :, 0].size)).sum(axis=-1), 0.0)
    if cam.max() > 0:
        cam = cam / cam.max()
    np.testing.assert_allclose(sal.values, cam, atol=1e-6)


def test_gradcam_zero_gradient_gives_zero_map():
    model = toy_cam_model()
    model.net_.layer("head").weights[...] = 0.0
    sal = gradcam(model, np.random.default_rng(2).uniform(size=(8, 8, 3)), 1)
    np.testing.assert_array_equal(sal.values, np.zeros_like(sal.values))
    np.testing.assert_array_equal(sal.upsampled, np.zeros_like(sal.upsampled))


def test_gradcam_normalization_and_default_layer():
    model = toy_cam_model()
    sal = gradcam(model, np.random.default_rng(3).uniform(size=(8, 8, 3)), 1)
    assert sal.target_layer == "conv1"
    assert sal.values.min() >= 0.0
    assert sal.values.max() in (0.0, pytest.approx(1.0))
    assert sal.upsampled.shape == (8, 8)


def test_gradcam_unknown_layer_rejected():
    model = toy_cam_model()
    with pytest.raises(KeyError):
        gradcam(model, np.zeros((8, 8, 3)), 1, layer="gap")


def test_saliency_shift_basics():
    a = np.random.default_rng(4).uniform(size=(6, 6))
    assert saliency_shift(a, a) == pytest.approx(0.0, abs=1e-12)
    assert saliency_shift(a, 2.0 * a) == pytest.approx(0.0, abs=1e-12)
    left = np.zeros((4, 4))
    left[:, :2] = 1.0
    right = np.zeros((4, 4))
    right[:, 2:] = 1.0
    assert saliency_shift(left, right) == pytest.approx(1.0)
    assert math.isnan(saliency_shift(np.zeros((4, 4)), a[:4, :4]))


def fake_record(points, success=True, label=1):
    h = w = 16
    pts = np.asarray(points, dtype=np.float64)
    return AttackRecord(success=success, s_min=0.01 if success else math.inf,
                        best_points=pts if success else None,
                        best_points_norm=pts / 16 if success else None,
                        canvas_hw=(h, w), label=label, seed=0,
                        restarts_used=1, phase2_entered_at=2 if success else None,
                        iteration_log=[])


class StubModel:
    """Predicts a fixed class for clean images and another for doodled."""

    def __init__(self, arch_id, clean_class, doodled_class, classes=(1, 2, 3)):
        self.arch_id = arch_id
        self.classes_ = np.asarray(classes)
        self.clean_class = clean_class
        self.doodled_class = doodled_class

    def predict(self, images):
        out = []
        for img in images:
            doodled = img.min() < 0.2
            out.append(self.doodled_class if doodled else self.clean_class)
        return np.asarray(out)


def test_transfer_eval_filters_and_scores():
    rng = np.random.default_rng(5)
    image = rng.uniform(0.4, 1.0, size=(16, 16, 3))
    stroke = np.array([[[2.0, 8.0], [6.0, 8.0], [10.0, 8.0], [14.0, 8.0]]])
    attacks = [
        (fake_record(stroke), image, 1),                  # counted, fooled
        (fake_record(stroke, success=False), image, 1),   # source failed
        (fake_record(stroke), image, 2),                  # target wrong on clean
    ]
    source = StubModel("cnn-a", clean_class=1, doodled_class=3)
    target = StubModel("cnn-b", clean_class=1, doodled_class=3)
    report = transfer_eval(attacks, source, target)
    assert (report.n_total, report.n_success) == (1, 1)
    assert report.score == 1.0
    assert report.source_arch == "cnn-a" and report.target_arch == "cnn-b"


def test_transfer_score_zero_when_target_never_fooled():
    rng = np.random.default_rng(6)
    image = rng.uniform(0.4, 1.0, size=(16, 16, 3))
    stroke = np.array([[[2.0, 8.0], [6.0, 8.0], [10.0, 8.0], [14.0, 8.0]]])
    attacks = [(fake_record(stroke), image, 1)] * 4
    target = StubModel("cnn-b", clean_class=1, doodled_class=1)
    report = transfer_eval(attacks, StubModel("cnn-a", 1, 3), target)
    assert report.n_total == 4 and report.n_success == 0
    assert report.score == 0.0


def test_transfer_quarter_score_and_order_invariance():
    rng = np.random.default_rng(7)
    images = [rng.uniform(0.4, 1.0, size=(16, 16, 3)) for _ in range(4)]
    stroke = np.array([[[2.0, 8.0], [6.0, 8.0], [10.0, 8.0], [14.0, 8.0]]])

    # target fooled only by the doodled variant of one specific base
    # image, identified by a corner pixel the stroke never touches
    class PickyTarget:
        arch_id = "cnn-b"
        classes_ = np.asarray((1, 2, 3))

        def __init__(self, corner):
            self.corner = corner

        def predict(self, imgs):
            out = []
            for img in imgs:
                doodled = img.min() < 0.2
                near = abs(float(img[0, 0, 0]) - self.corner) < 1e-9
                out.append(3 if (doodled and near) else 1)
            return np.asarray(out)

    attacks = [(fake_record(stroke), img, 1) for img in images]
    target = PickyTarget(float(images[2][0, 0, 0]))
    report = transfer_eval(attacks, StubModel("cnn-a", 1, 3), target)
    assert report.n_total == 4
    assert report.n_success == 1
    assert report.score == pytest.approx(0.25)
    shuffled = [attacks[i] for i in (2, 0, 3, 1)]
    report2 = transfer_eval(shuffled, StubModel("cnn-a", 1, 3), target)
    assert (report2.n_total, report2.n_success) == (report.n_total,
                                                    report.n_success)


def test_transfer_undefined_when_empty():
    report = transfer_eval([], StubModel("cnn-a", 1, 3), StubModel("cnn-b", 1, 3))
    assert not report.defined
    assert math.isnan(report.score)


def test_transfer_requires_shared_classes():
    from strokefool.errors import InputError

    bad = StubModel("cnn-b", 1, 3, classes=(1, 2))
    with pytest.raises(InputError):
        transfer_eval([], StubModel("cnn-a", 1, 3), bad)
