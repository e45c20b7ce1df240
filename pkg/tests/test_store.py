import json
import math

import numpy as np
import pytest

from strokefool.attack import AttackConfig, AttackRecord
from strokefool.errors import (CorruptFileError, SchemaError,
                               SchemaVersionError, StoreError)
from strokefool.store import (ATTACK_CSV_FIELDS, AttackFile, ResultsWriter,
                              attack_file_from_record, attack_row, export_svg,
                              load_attack, load_run_config, save_attack,
                              save_run_config, svg_control_points,
                              transfer_row)


def sample_record(success=True, seed=7):
    rng = np.random.default_rng(3)
    pts = rng.uniform(10.0, 54.0, size=(2, 4, 2))
    norm = pts / 64.0
    snapped = norm * 64.0
    return AttackRecord(success=success, s_min=0.0123 if success else math.inf,
                        best_points=snapped if success else None,
                        best_points_norm=norm if success else None,
                        canvas_hw=(64, 64), label=3, seed=seed,
                        restarts_used=1, phase2_entered_at=5 if success else None,
                        iteration_log=[])


def test_attack_file_roundtrip_bit_exact(tmp_path):
    record = sample_record()
    af = attack_file_from_record(record, "disk/disk_0001.png",
                                 AttackConfig(curves=2, iterations=50), "cnn-a")
    path = tmp_path / "attack.json"
    save_attack(path, af)
    loaded = load_attack(path)
    np.testing.assert_array_equal(loaded.best_points_norm, af.best_points_norm)
    np.testing.assert_array_equal(loaded.control_points(), record.best_points)
    assert loaded.s_min == af.s_min
    assert loaded.config == af.config
    assert loaded.image_ref == af.image_ref
    assert loaded.arch_id == "cnn-a"


def test_failed_attack_roundtrip(tmp_path):
    af = attack_file_from_record(sample_record(success=False), "x.png",
                                 AttackConfig(), "cnn-a")
    path = tmp_path / "fail.json"
    save_attack(path, af)
    loaded = load_attack(path)
    assert not loaded.success
    assert math.isinf(loaded.s_min)
    assert loaded.control_points() is None


def test_truncated_attack_file_rejected(tmp_path):
    path = tmp_path / "attack.json"
    save_attack(path, attack_file_from_record(sample_record(), "x.png",
                                              AttackConfig(), "cnn-a"))
    path.write_text(path.read_text()[:-40])
    with pytest.raises(CorruptFileError):
        load_attack(path)


def test_edited_attack_file_rejected(tmp_path):
    path = tmp_path / "attack.json"
    save_attack(path, attack_file_from_record(sample_record(), "x.png",
                                              AttackConfig(), "cnn-a"))
    payload = json.loads(path.read_text())
    payload["body"]["label"] = 2  # stealth edit without re-checksumming
    path.write_text(json.dumps(payload))
    with pytest.raises(CorruptFileError):
        load_attack(path)


def test_unknown_field_rejected_strictly(tmp_path):
    import hashlib

    path = tmp_path / "attack.json"
    save_attack(path, attack_file_from_record(sample_record(), "x.png",
                                              AttackConfig(), "cnn-a"))
    payload = json.loads(path.read_text())
    payload["body"]["comment"] = "extra"
    canonical = json.dumps(payload["body"], sort_keys=True, separators=(",", ":"))
    payload["checksum"] = hashlib.sha256(canonical.encode()).hexdigest()
    path.write_text(json.dumps(payload))
    with pytest.raises(SchemaError):
        load_attack(path)


def test_wrong_schema_version_rejected(tmp_path):
    path = tmp_path / "attack.json"
    save_attack(path, attack_file_from_record(sample_record(), "x.png",
                                              AttackConfig(), "cnn-a"))
    payload = json.loads(path.read_text())
    payload["schema_version"] = 2
    path.write_text(json.dumps(payload))
    with pytest.raises(SchemaVersionError):
        load_attack(path)


def test_svg_export_structure_and_roundtrip():
    record = sample_record()
    af = attack_file_from_record(record, "x.png", AttackConfig(curves=2), "cnn-a")
    svg = export_svg(af)
    assert svg.count("<path") == 2
    assert 'stroke="black"' in svg and 'viewBox="0 0 64 64"' in svg
    parsed = svg_control_points(svg)
    np.testing.assert_allclose(parsed, record.best_points, atol=1e-6)
    # repr-formatted coordinates survive the text round-trip exactly
    np.testing.assert_array_equal(parsed, record.best_points)


def test_svg_single_curve_single_path():
    record = sample_record()
    record.best_points = record.best_points[:1]
    record.best_points_norm = record.best_points_norm[:1]
    af = attack_file_from_record(record, "x.png", AttackConfig(curves=1), "cnn-a")
    assert export_svg(af).count("<path") == 1


def test_svg_collinear_control_polygon_renders_straight():
    from strokefool.bezier import flatten

    pts = np.array([[[8.0, 8.0], [24.0, 24.0], [40.0, 40.0], [56.0, 56.0]]])
    af = AttackFile("x.png", 1, AttackConfig(curves=1), pts / 64.0, 0.01, True,
                    0, "cnn-a", (64, 64))
    poly = flatten(svg_control_points(export_svg(af))[0], 16)
    xs, ys = poly.vertices[:, 0], poly.vertices[:, 1]
    np.testing.assert_allclose(ys, xs, atol=1e-9)


def test_svg_export_refuses_failure():
    af = attack_file_from_record(sample_record(success=False), "x.png",
                                 AttackConfig(), "cnn-a")
    with pytest.raises(StoreError):
        export_svg(af)


def test_svg_renders_like_hard_mask():
    from strokefool.raster import hard_mask, rasterize

    record = sample_record()
    af = attack_file_from_record(record, "x.png", AttackConfig(curves=2), "cnn-a")
    parsed = svg_control_points(export_svg(af))
    reference = hard_mask(rasterize(record.best_points, (64, 64)))
    reparsed = hard_mask(rasterize(parsed, (64, 64)))
    np.testing.assert_array_equal(reference, reparsed)


def test_results_writer_header_and_rows(tmp_path):
    path = tmp_path / "results.csv"
    writer = ResultsWriter(path, ATTACK_CSV_FIELDS)
    assert path.read_text().strip() == ",".join(ATTACK_CSV_FIELDS)
    writer.append(attack_row("a.png", sample_record(), AttackConfig()))
    writer.append(attack_row("b.png", sample_record(success=False), AttackConfig()))
    lines = path.read_text().strip().splitlines()
    assert len(lines) == 3
    with pytest.raises(StoreError):
        writer.append({"bogus": 1})
    with pytest.raises(StoreError):
        ResultsWriter(path, ["other", "header"])


def test_transfer_row_two_decimal_score():
    from strokefool.analysis import TransferReport

    report = TransferReport("cnn-a", "cnn-b", 3, True, n_total=37, n_success=10)
    assert transfer_row(report)["score"] == "0.27"


def test_run_config_defaults_merge_and_unknown_keys(tmp_path):
    path = tmp_path / "run.json"
    path.write_text(json.dumps({"seed": 9, "attack": {"curves": 1}}))
    cfg = load_run_config(path)
    assert cfg["seed"] == 9
    assert cfg["attack"]["curves"] == 1
    assert cfg["attack"]["batch"] == 10  # default preserved
    assert cfg["preprocess"]["center_crop"] == 64
    path.write_text(json.dumps({"sede": 9}))
    with pytest.raises(SchemaError):
        load_run_config(path)
    path.write_text(json.dumps({"attack": {"curvess": 1}}))
    with pytest.raises(SchemaError):
        load_run_config(path)


def test_run_config_save_load_roundtrip(tmp_path):
    from strokefool.store import DEFAULT_RUN_CONFIG

    path = tmp_path / "run.json"
    save_run_config(path, DEFAULT_RUN_CONFIG)
    assert load_run_config(path) == DEFAULT_RUN_CONFIG
