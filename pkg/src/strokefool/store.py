"""Persistence: attack files, vector export, run configuration, CSV results.

Attack files are strict-schema JSON with a sha256 checksum: they are
scientific records, so unknown fields, version drift, or bit damage all
refuse to load.  Control points are stored normalized to [0, 1]^2 in
canvas units; denormalization multiplies back by the stored canvas size
and reproduces the optimizer's coordinates bit-exactly (the attack
engine records the already-denormalized product).
"""

import csv
import hashlib
import json
import math
import os
import re

import numpy as np

from .attack import AttackConfig
from .errors import CorruptFileError, SchemaError, SchemaVersionError, StoreError

ATTACK_SCHEMA_VERSION = 1

_BODY_FIELDS = {"image_ref", "label", "config", "best_points_norm", "s_min",
                "success", "seed", "arch_id", "canvas_hw"}
_CONFIG_FIELDS = {"curves", "points_per_curve", "width_px", "softness_px",
                  "batch", "iterations", "size_weight", "lr", "max_restarts",
                  "seed", "segments", "eot"}
_EOT_FIELDS = {"max_rot_deg", "max_trans_frac", "min_scale", "max_scale"}


class AttackFile:
    """In-memory form of one persisted attack."""

    def __init__(self, image_ref, label, config, best_points_norm, s_min,
                 success, seed, arch_id, canvas_hw):
        self.image_ref = image_ref
        self.label = int(label)
        self.config = config
        self.best_points_norm = best_points_norm
        self.s_min = s_min
        self.success = bool(success)
        self.seed = int(seed)
        self.arch_id = arch_id
        self.canvas_hw = tuple(canvas_hw)

    def control_points(self):
        """Denormalize back to pixel coordinates on the stored canvas."""
        if self.best_points_norm is None:
            return None
        h, w = self.canvas_hw
        return np.asarray(self.best_points_norm) * np.array([w, h], dtype=np.float64)

    def body_dict(self):
        return {
            "image_ref": self.image_ref,
            "label": self.label,
            "config": self.config.to_dict(),
            "best_points_norm": (None if self.best_points_norm is None else
                                 np.asarray(self.best_points_norm).tolist()),
            "s_min": None if math.isinf(self.s_min) else self.s_min,
            "success": self.success,
            "seed": self.seed,
            "arch_id": self.arch_id,
            "canvas_hw": list(self.canvas_hw),
        }


def attack_file_from_record(record, image_ref, config, arch_id):
    """Package an AttackRecord for persistence."""
    return AttackFile(
        image_ref=image_ref, label=record.label, config=config,
        best_points_norm=(None if record.best_points_norm is None
                          else record.best_points_norm.copy()),
        s_min=record.s_min, success=record.success, seed=record.seed,
        arch_id=arch_id, canvas_hw=record.canvas_hw)


def _canonical(body):
    return json.dumps(body, sort_keys=True, separators=(",", ":"))


def save_attack(path, attack_file):
    body = attack_file.body_dict()
    payload = {
        "schema_version": ATTACK_SCHEMA_VERSION,
        "checksum": hashlib.sha256(_canonical(body).encode()).hexdigest(),
        "body": body,
    }
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=1, sort_keys=True)
        fh.write("\n")


def load_attack(path):
    try:
        with open(path, encoding="utf-8") as fh:
            payload = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise CorruptFileError(f"{path}: unreadable attack file: {exc}") from exc
    if not isinstance(payload, dict) or set(payload) != {"schema_version",
                                                         "checksum", "body"}:
        raise SchemaError(f"{path}: top-level keys do not match the schema")
    if payload["schema_version"] != ATTACK_SCHEMA_VERSION:
        raise SchemaVersionError(
            f"{path}: schema version {payload['schema_version']} unsupported")
    body = payload["body"]
    digest = hashlib.sha256(_canonical(body).encode()).hexdigest()
    if digest != payload["checksum"]:
        raise CorruptFileError(f"{path}: checksum mismatch")
    if set(body) != _BODY_FIELDS:
        unknown = set(body) - _BODY_FIELDS
        missing = _BODY_FIELDS - set(body)
        raise SchemaError(f"{path}: unknown fields {sorted(unknown)}, "
                          f"missing {sorted(missing)}")
    if set(body["config"]) != _CONFIG_FIELDS or \
            set(body["config"]["eot"]) != _EOT_FIELDS:
        raise SchemaError(f"{path}: attack config fields do not match schema")
    cfg = AttackConfig.from_dict(body["config"])
    norm = body["best_points_norm"]
    return AttackFile(
        image_ref=body["image_ref"], label=body["label"], config=cfg,
        best_points_norm=None if norm is None else np.asarray(norm, dtype=np.float64),
        s_min=math.inf if body["s_min"] is None else float(body["s_min"]),
        success=body["success"], seed=body["seed"], arch_id=body["arch_id"],
        canvas_hw=tuple(body["canvas_hw"]))


# ---------------------------------------------------------------------------
# Vector export
# ---------------------------------------------------------------------------

def export_svg(attack_file):
    """Cubic-path SVG of a successful attack, black strokes on transparency.

    Only 4-control-point curves map onto native cubic path segments; the
    exported coordinates parse back to the stored control points.
    """
    if not attack_file.success:
        raise StoreError("cannot export an unsuccessful attack")
    points = attack_file.control_points()
    if points.shape[1] != 4:
        raise StoreError("SVG export supports 4 control points per curve")
    h, w = attack_file.canvas_hw
    width = attack_file.config.width_px
    paths = []
    for curve in points:
        coords = [f"{float(x)!r},{float(y)!r}" for x, y in curve]
        d = f"M {coords[0]} C {coords[1]} {coords[2]} {coords[3]}"
        paths.append(
            f'  <path d="{d}" stroke="black" stroke-width="{float(width)!r}" '
            f'fill="none" stroke-linecap="round"/>')
    body = "\n".join(paths)
    return (f'<svg xmlns="http://www.w3.org/2000/svg" '
            f'viewBox="0 0 {w} {h}" width="{w}" height="{h}">\n'
            f"{body}\n</svg>\n")


_PATH_RE = re.compile(r'd="M ([^"]+)"')
_NUM = r"[-+0-9.eE]+"


def svg_control_points(svg_text):
    """Parse the control points back out of an exported document."""
    curves = []
    for match in _PATH_RE.finditer(svg_text):
        nums = re.findall(_NUM, match.group(1))
        if len(nums) != 8:
            raise StoreError("unexpected path segment in SVG")
        vals = [float(v) for v in nums]
        curves.append(np.asarray(vals, dtype=np.float64).reshape(4, 2))
    if not curves:
        raise StoreError("no stroke paths found in SVG")
    return np.stack(curves)


# ---------------------------------------------------------------------------
# Run configuration
# ---------------------------------------------------------------------------

DEFAULT_RUN_CONFIG = {
    "seed": 0,
    "out_dir": "runs/out",
    "dataset": {"root": "runs/dataset", "per_class": 120, "canvas": 96,
                "fractions": [0.7, 0.15, 0.15]},
    "preprocess": {"resize_to": 72, "center_crop": 64},
    "train": {"lr": 0.001, "batch_size": 32,
              "epochs": {"cnn-a": 60, "cnn-b": 120}},
    "models": {"cnn-a": "runs/out/cnn_a.model",
               "cnn-b": "runs/out/cnn_b.model"},
    "attack": AttackConfig(iterations=1500).to_dict(),
}


def _merge_section(defaults, given, path):
    out = dict(defaults)
    for key, value in given.items():
        if key not in defaults:
            raise SchemaError(f"run config: unknown key {path + key!r}")
        if isinstance(defaults[key], dict):
            if not isinstance(value, dict):
                raise SchemaError(f"run config: {path + key!r} must be a table")
            out[key] = _merge_section(defaults[key], value, path + key + ".")
        else:
            out[key] = value
    return out


def load_run_config(path):
    """Read the JSON run config; unknown keys are rejected, missing keys
    fall back to the defaults."""
    with open(path, encoding="utf-8") as fh:
        given = json.load(fh)
    if not isinstance(given, dict):
        raise SchemaError("run config must be a JSON object")
    return _merge_section(DEFAULT_RUN_CONFIG, given, "")


def save_run_config(path, config):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config, fh, indent=2, sort_keys=True)
        fh.write("\n")


def attack_config_from_run(config):
    return AttackConfig.from_dict(config["attack"])


# ---------------------------------------------------------------------------
# Results CSV
# ---------------------------------------------------------------------------

class ResultsWriter:
    """Append-only CSV with a stable header; one writer per file."""

    def __init__(self, path, fieldnames):
        self.path = path
        self.fieldnames = list(fieldnames)
        exists = os.path.exists(path)
        if exists:
            with open(path, newline="", encoding="utf-8") as fh:
                header = next(csv.reader(fh), None)
            if header != self.fieldnames:
                raise StoreError(f"{path}: existing header {header} does not "
                                 f"match {self.fieldnames}")
        else:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                csv.writer(fh).writerow(self.fieldnames)

    def append(self, row):
        missing = set(self.fieldnames) - set(row)
        extra = set(row) - set(self.fieldnames)
        if missing or extra:
            raise StoreError(f"row fields do not match header "
                             f"(missing {sorted(missing)}, extra {sorted(extra)})")
        with open(self.path, "a", newline="", encoding="utf-8") as fh:
            csv.DictWriter(fh, fieldnames=self.fieldnames).writerow(row)


ATTACK_CSV_FIELDS = ["image_ref", "label", "curves", "eot_enabled", "success",
                     "s_min", "restarts_used", "phase2_entered_at", "seed"]
TRANSFER_CSV_FIELDS = ["source_arch", "target_arch", "curves", "eot_enabled",
                       "n_total", "n_success", "score"]
ABLATION_CSV_FIELDS = ["arm", "eot_enabled", "n_images", "computer_successes",
                       "replication_successes"]


def attack_row(image_ref, record, config):
    ranges = (config.eot.max_rot_deg, config.eot.max_trans_frac,
              config.eot.min_scale, config.eot.max_scale)
    return {
        "image_ref": image_ref,
        "label": record.label,
        "curves": config.curves,
        "eot_enabled": ranges != (0.0, 0.0, 1.0, 1.0),
        "success": record.success,
        "s_min": "" if math.isinf(record.s_min) else repr(record.s_min),
        "restarts_used": record.restarts_used,
        "phase2_entered_at": ("" if record.phase2_entered_at is None
                              else record.phase2_entered_at),
        "seed": record.seed,
    }


def transfer_row(report):
    return {
        "source_arch": report.source_arch,
        "target_arch": report.target_arch,
        "curves": report.curves,
        "eot_enabled": report.eot_enabled,
        "n_total": report.n_total,
        "n_success": report.n_success,
        "score": "" if not report.defined else f"{report.score:.2f}",
    }


def ablation_rows(report):
    return [{
        "arm": arm.name,
        "eot_enabled": arm.eot_enabled,
        "n_images": report.n_images,
        "computer_successes": arm.computer_successes,
        "replication_successes": arm.replication_successes,
    } for arm in report.arms]
