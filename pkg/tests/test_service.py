import json
import math
import os

import numpy as np
import pytest
from fastapi.testclient import TestClient

from strokefool.attack import AttackConfig, AttackRecord
from strokefool.bezier import flatten
from strokefool.classifier import (PreprocessSpec, TinyConvNet, preprocess,
                                   save_model)
from strokefool.compose import overlay
from strokefool.data import generate_shape_dataset, load_image, scan_dataset
from strokefool.raster import rasterize, rasterize_polylines
from strokefool.service import create_app
from strokefool.store import attack_file_from_record, save_attack


@pytest.fixture(scope="module")
def service_env(tmp_path_factory):
    root = tmp_path_factory.mktemp("svc")
    data_root = root / "data"
    generate_shape_dataset(data_root, per_class=4, seed=3)
    manifest = scan_dataset(data_root, seed=0)
    spec = PreprocessSpec(72, 64)

    from strokefool.data import load_split

    train_x, train_y = load_split(manifest, "train", spec)
    model = TinyConvNet(arch="cnn-a", input_size=64, epochs=4, seed=0)
    model.fit(train_x, train_y)
    model_path = root / "model.stfn"
    save_model(model, model_path)

    # craft a "successful" attack record for a pool image: use whatever
    # strokes, flipping the label so fooled-ness is deterministic
    ref, label = manifest.split_items("pool")[0]
    image = preprocess(load_image(manifest.path(ref)), spec)
    pred = int(model.predict(image[np.newaxis])[0])
    pts = np.array([[[18.0, 20.0], [30.0, 44.0], [38.0, 20.0], [46.0, 40.0]]])
    norm = pts / 64.0
    record = AttackRecord(success=True, s_min=0.02,
                          best_points=norm * 64.0, best_points_norm=norm,
                          canvas_hw=(64, 64), label=pred, seed=0,
                          restarts_used=1, phase2_entered_at=2,
                          iteration_log=[])
    attacks = root / "attacks"
    attacks.mkdir()
    save_attack(attacks / "demo.json",
                attack_file_from_record(record, ref, AttackConfig(curves=1), "cnn-a"))
    app = create_app(str(model_path), str(data_root), str(attacks),
                     str(root / "sessions"), spec,
                     {i + 1: n for i, n in enumerate(manifest.classes)})
    client = TestClient(app)
    return client, model, image, record


def _new_session(client):
    resp = client.post("/sessions", json={"attack": "demo.json"})
    assert resp.status_code == 200
    return resp.json()


def test_create_and_fetch_session(service_env):
    client, _, _, record = service_env
    state = _new_session(client)
    assert state["label"] == record.label
    got = client.get(f"/sessions/{state['session_id']}")
    assert got.status_code == 200
    assert got.json()["outcomes"] == []


def test_unknown_session_404(service_env):
    client, *_ = service_env
    assert client.get("/sessions/nope").status_code == 404
    assert client.post("/sessions/nope/strokes",
                       json={"strokes": []}).status_code == 404
    assert client.post("/sessions", json={"attack": "ghost.json"}).status_code == 404


def test_image_endpoint_serves_clean_png(service_env):
    client, _, image, _ = service_env
    state = _new_session(client)
    resp = client.get(f"/sessions/{state['session_id']}/image")
    assert resp.status_code == 200
    assert resp.headers["content-type"] == "image/png"
    import io

    from PIL import Image

    served = np.asarray(Image.open(io.BytesIO(resp.content)),
                        dtype=np.float64) / 255.0
    assert served.shape == image.shape
    assert np.abs(served - image).max() <= 0.5 / 255 + 1e-9


def test_reference_endpoint_serves_svg(service_env):
    client, *_ = service_env
    state = _new_session(client)
    resp = client.get(f"/sessions/{state['session_id']}/reference")
    assert resp.status_code == 200
    assert resp.text.startswith("<svg")
    assert resp.text.count("<path") == 1


def test_empty_strokes_equal_clean_classification(service_env):
    client, model, image, _ = service_env
    state = _new_session(client)
    resp = client.post(f"/sessions/{state['session_id']}/strokes",
                       json={"strokes": []})
    assert resp.status_code == 200
    outcome = resp.json()
    proba = model.predict_proba(image[np.newaxis])[0]
    assert outcome["predicted_class"] == int(model.classes_[np.argmax(proba)])
    assert outcome["confidence_predicted"] == pytest.approx(float(proba.max()))
    assert outcome["fooled"] == (outcome["predicted_class"] != state["label"])


def test_malformed_strokes_rejected(service_env):
    client, *_ = service_env
    sid = _new_session(client)["session_id"]
    one_point = {"strokes": [{"points": [[0.5, 0.5]]}]}
    assert client.post(f"/sessions/{sid}/strokes", json=one_point).status_code == 422
    nan_point = {"strokes": [{"points": [[0.5, 0.5], [None, 0.2]]}]}
    assert client.post(f"/sessions/{sid}/strokes", json=nan_point).status_code == 422
    out_of_range = {"strokes": [{"points": [[0.5, 0.5], [7.0, 0.2]]}]}
    assert client.post(f"/sessions/{sid}/strokes",
                       json=out_of_range).status_code == 422


def test_submission_matches_library_math_bitwise(service_env):
    client, model, image, record = service_env
    state = _new_session(client)
    stroke = [[0.2, 0.3], [0.5, 0.35], [0.8, 0.6]]
    resp = client.post(f"/sessions/{state['session_id']}/strokes",
                       json={"strokes": [{"points": stroke}]})
    assert resp.status_code == 200
    outcome = resp.json()

    polyline = np.asarray(stroke) * 64.0
    cov = rasterize_polylines([polyline], (64, 64), width_px=1.5)
    proba = model.predict_proba(overlay(image, cov)[np.newaxis])[0]
    idx = int(np.argmax(proba))
    assert outcome["predicted_class"] == int(model.classes_[idx])
    assert outcome["confidence_predicted"] == float(proba[idx])
    assert outcome["confidence_true"] == float(
        proba[model.class_index(state["label"])])


def test_self_replication_reproduces_computer_attack(service_env):
    """Submitting the reference attack's own flattened polylines yields
    the same outcome as the computer attack under identity transform."""
    client, model, image, record = service_env
    sid = _new_session(client)["session_id"]
    polys = [flatten(curve, 32).vertices for curve in record.best_points]
    strokes = [{"points": (v / 64.0).tolist()} for v in polys]
    resp = client.post(f"/sessions/{sid}/strokes", json={"strokes": strokes})
    assert resp.status_code == 200
    outcome = resp.json()

    cov = rasterize(record.best_points, (64, 64))
    proba = model.predict_proba(overlay(image, cov)[np.newaxis])[0]
    computer_pred = int(model.classes_[np.argmax(proba)])
    assert outcome["predicted_class"] == computer_pred
    assert outcome["fooled"] == (computer_pred != record.label)
    # identical inputs give bit-identical confidences (no service-only math)
    assert outcome["confidence_predicted"] == float(proba.max())


def test_outcomes_append_and_persist(service_env):
    client, *_ = service_env
    sid = _new_session(client)["session_id"]
    for k in range(2):
        client.post(f"/sessions/{sid}/strokes", json={"strokes": []})
    state = client.get(f"/sessions/{sid}").json()
    assert len(state["outcomes"]) == 2
    times = [o["submitted_at"] for o in state["outcomes"]]
    assert times == sorted(times)


def test_oversized_payload_rejected(service_env):
    client, *_ = service_env
    sid = _new_session(client)["session_id"]
    big = {"strokes": [{"points": [[0.1, 0.1]] * 2100} for _ in range(10)]}
    resp = client.post(f"/sessions/{sid}/strokes", json=big)
    assert resp.status_code in (413, 422)