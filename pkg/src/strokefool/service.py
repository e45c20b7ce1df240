"""HTTP service for the human-replication phase.

Serves clean images and reference stroke documents, accepts freehand
stroke submissions, and returns the classifier's verdict on the doodled
image.  Classification is exactly the library path (rasterize the
polylines, multiply onto the image, forward) - the service adds no math
of its own.  Sessions are persisted as JSON and their outcome logs are
append-only.
"""

import io
import json
import os
import threading
import time
import uuid

import numpy as np
from fastapi import FastAPI, HTTPException, Response
from pydantic import BaseModel, Field

from . import raster
from .classifier import PreprocessSpec, load_model, preprocess
from .compose import overlay
from .data import load_image
from .store import export_svg, load_attack

MAX_STROKES = 200
MAX_POINTS_TOTAL = 20_000


class StrokeIn(BaseModel):
    points: list = Field(min_length=2, max_length=MAX_POINTS_TOTAL)
    width_px: float | None = None


class StrokesIn(BaseModel):
    strokes: list[StrokeIn] = Field(max_length=MAX_STROKES)


class SessionStore:
    """Loads referenced artifacts once; guards per-session appends."""

    def __init__(self, model_path, dataset_root, attacks_dir, sessions_dir,
                 preprocess_spec=None, class_names=None):
        self.model = load_model(model_path)
        self.dataset_root = dataset_root
        self.attacks_dir = attacks_dir
        self.sessions_dir = sessions_dir
        self.spec = preprocess_spec or PreprocessSpec()
        self.class_names = class_names or {}
        os.makedirs(sessions_dir, exist_ok=True)
        self.sessions = {}
        self.locks = {}
        self._global = threading.Lock()
        for name in sorted(os.listdir(sessions_dir)):
            if name.endswith(".json"):
                with open(os.path.join(sessions_dir, name)) as fh:
                    state = json.load(fh)
                self.sessions[state["session_id"]] = state
                self.locks[state["session_id"]] = threading.Lock()

    def _persist(self, state):
        path = os.path.join(self.sessions_dir, state["session_id"] + ".json")
        with open(path, "w") as fh:
            json.dump(state, fh, indent=1, sort_keys=True)

    def create(self, attack_name):
        path = os.path.join(self.attacks_dir, attack_name)
        if not os.path.isfile(path):
            raise FileNotFoundError(attack_name)
        attack = load_attack(path)
        if not attack.success:
            raise ValueError("attack file records a failed attack")
        session_id = uuid.uuid4().hex[:12]
        state = {
            "session_id": session_id,
            "attack_file": attack_name,
            "image_ref": attack.image_ref,
            "label": attack.label,
            "label_name": self.class_names.get(attack.label,
                                               f"class_{attack.label}"),
            "width_px": attack.config.width_px,
            "canvas_hw": list(attack.canvas_hw),
            "created_at": time.time(),
            "outcomes": [],
        }
        with self._global:
            self.sessions[session_id] = state
            self.locks[session_id] = threading.Lock()
            self._persist(state)
        return state

    def get(self, session_id):
        state = self.sessions.get(session_id)
        if state is None:
            raise KeyError(session_id)
        return state

    def clean_image(self, state):
        raw = load_image(os.path.join(self.dataset_root, state["image_ref"]))
        return preprocess(raw, self.spec)

    def attack(self, state):
        return load_attack(os.path.join(self.attacks_dir, state["attack_file"]))

    def classify_strokes(self, state, strokes):
        """Rasterize normalized polylines, composite, classify, record."""
        image = self.clean_image(state)
        h, w = image.shape[:2]
        scale = np.array([w, h], dtype=np.float64)
        polylines = []
        width = state["width_px"]
        for stroke in strokes:
            pts = np.asarray(stroke.points, dtype=np.float64)
            if pts.ndim != 2 or pts.shape[1] != 2 or pts.shape[0] < 2:
                raise ValueError("each stroke needs >= 2 [x, y] points")
            if not np.all(np.isfinite(pts)):
                raise ValueError("stroke coordinates must be finite")
            if pts.min() < -0.5 or pts.max() > 1.5:
                raise ValueError("stroke coordinates must be normalized to [0, 1]")
            polylines.append(pts * scale)
            if stroke.width_px is not None:
                width = float(stroke.width_px)
        if polylines:
            cov = raster.rasterize_polylines(polylines, (h, w), width_px=width)
            doodled = overlay(image, cov)
        else:
            doodled = image
        proba = self.model.predict_proba(doodled[np.newaxis])[0]
        predicted_idx = int(np.argmax(proba))
        predicted = int(self.model.classes_[predicted_idx])
        true_idx = self.model.class_index(state["label"])
        outcome = {
            "predicted_class": predicted,
            "predicted_name": self.class_names.get(predicted,
                                                   f"class_{predicted}"),
            "confidence_true": float(proba[true_idx]),
            "confidence_predicted": float(proba[predicted_idx]),
            "fooled": predicted != state["label"],
            "n_strokes": len(strokes),
            "submitted_at": time.time(),
        }
        with self.locks[state["session_id"]]:
            state["outcomes"].append(outcome)
            self._persist(state)
        return outcome


def create_app(model_path, dataset_root, attacks_dir, sessions_dir,
               preprocess_spec=None, class_names=None):
    store = SessionStore(model_path, dataset_root, attacks_dir, sessions_dir,
                         preprocess_spec, class_names)
    app = FastAPI(title="strokefool replication service")
    app.state.store = store

    @app.post("/sessions")
    def create_session(body: dict):
        name = body.get("attack")
        if not isinstance(name, str) or "/" in name or "\\" in name:
            raise HTTPException(422, "body must name an attack file")
        try:
            return store.create(name)
        except FileNotFoundError:
            raise HTTPException(404, f"no attack file named {name!r}") from None
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None

    def _session_or_404(session_id):
        try:
            return store.get(session_id)
        except KeyError:
            raise HTTPException(404, f"unknown session {session_id!r}") from None

    @app.get("/sessions/{session_id}")
    def get_session(session_id: str):
        return _session_or_404(session_id)

    @app.get("/sessions/{session_id}/image")
    def get_image(session_id: str):
        state = _session_or_404(session_id)
        image = store.clean_image(state)
        buf = io.BytesIO()
        from PIL import Image

        data = np.rint(np.clip(image, 0, 1) * 255).astype(np.uint8)
        Image.fromarray(data, "RGB").save(buf, format="PNG")
        return Response(content=buf.getvalue(), media_type="image/png")

    @app.get("/sessions/{session_id}/reference")
    def get_reference(session_id: str):
        state = _session_or_404(session_id)
        svg = export_svg(store.attack(state))
        return Response(content=svg, media_type="image/svg+xml")

    @app.post("/sessions/{session_id}/strokes")
    def post_strokes(session_id: str, body: StrokesIn):
        state = _session_or_404(session_id)
        total = sum(len(s.points) for s in body.strokes)
        if total > MAX_POINTS_TOTAL:
            raise HTTPException(413, "stroke payload too large")
        try:
            return store.classify_strokes(state, body.strokes)
        except ValueError as exc:
            raise HTTPException(422, str(exc)) from None

    return app
