"""Desk-scale convolutional classifiers with an sklearn-style API.

Two small architectures stand in for the large pretrained models the
attack is normally aimed at; they share a class vocabulary so one can
serve as a transfer target for attacks tuned on the other.

Model files are a small binary container: magic bytes, a JSON header,
little-endian float32 weight blobs, and a trailing sha256 checksum.
"""

import hashlib
import io
import json
import struct

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .errors import (ArchMismatchError, CorruptFileError, DatasetError,
                     InputError, SchemaVersionError)
from .net import (AdamState, Conv2D, Dense, GlobalAvgPool, MaxPool2, Network,
                  ReLU, adam_step, softmax)

MODEL_MAGIC = b"STFN"
MODEL_VERSION = 1

# (kernel, out_channels) per conv block; each block is conv/relu/pool
ARCHS = {
    "cnn-a": [(3, 5), (3, 10), (3, 20)],
    "cnn-b": [(5, 10), (3, 20)],
}


def build_network(arch_id, class_count, input_size, rng, dtype=np.float32):
    if arch_id not in ARCHS:
        raise ValueError(f"unknown architecture {arch_id!r}")
    blocks = ARCHS[arch_id]
    if input_size % (2 ** len(blocks)) != 0:
        raise ValueError(f"input_size must be divisible by {2 ** len(blocks)}")
    layers = []
    channels = 3
    for i, (kernel, out_ch) in enumerate(blocks, start=1):
        layers.append((f"conv{i}", Conv2D(channels, out_ch, kernel, rng, dtype)))
        layers.append((f"relu{i}", ReLU()))
        layers.append((f"pool{i}", MaxPool2()))
        channels = out_ch
    layers.append(("gap", GlobalAvgPool()))
    layers.append(("head", Dense(channels, class_count, rng, dtype)))
    return Network(layers, arch_id=arch_id, input_size=input_size,
                   class_count=class_count, dtype=dtype)


class TinyConvNet(BaseEstimator, ClassifierMixin):
    """Small CNN classifier trained with Adam and cross-entropy.

    fit/predict/predict_proba follow the sklearn conventions; images are
    (n, H, W, 3) float arrays in [0, 1] and labels are arbitrary ints.
    Training is bit-reproducible for a fixed seed.
    """

    def __init__(self, arch="cnn-a", input_size=64, epochs=60, batch_size=32,
                 lr=0.001, seed=0, dtype="float32"):
        self.arch = arch
        self.input_size = input_size
        self.epochs = epochs
        self.batch_size = batch_size
        self.lr = lr
        self.seed = seed
        self.dtype = dtype

    @property
    def arch_id(self):
        return self.arch

    def _check_images(self, images):
        arr = np.asarray(images, dtype=np.float64)
        if arr.ndim == 3:
            arr = arr[np.newaxis]
        want = (self.input_size, self.input_size, 3)
        if arr.ndim != 4 or arr.shape[1:] != want:
            raise InputError(f"images must be (n,) + {want}, got {arr.shape}")
        return arr

    def fit(self, images, labels, validation=None):
        images = self._check_images(images)
        labels = np.asarray(labels)
        if labels.shape != (images.shape[0],):
            raise InputError("labels must be one int per image")
        self.classes_ = np.unique(labels)
        if self.classes_.size < 2:
            raise DatasetError("need at least 2 classes to train")
        y = np.searchsorted(self.classes_, labels)

        rng = np.random.default_rng(self.seed)
        self.net_ = build_network(self.arch, int(self.classes_.size),
                                  self.input_size, rng, np.dtype(self.dtype))
        params = self.net_.parameter_arrays()
        states = [AdamState.like(p) for p in params]

        n = images.shape[0]
        losses = []
        for _ in range(self.epochs):
            order = rng.permutation(n)
            for start in range(0, n, self.batch_size):
                batch = order[start:start + self.batch_size]
                xb = images[batch]
                yb = y[batch]
                logits = self.net_.forward(xb)
                p = softmax(logits)
                losses.append(float(-np.mean(
                    np.log(np.maximum(p[np.arange(len(yb)), yb], 1e-12)))))
                d_logits = p
                d_logits[np.arange(len(yb)), yb] -= 1.0
                d_logits /= len(yb)
                self.net_.zero_grads()
                self.net_.backward(d_logits)
                for i, (param, grad) in enumerate(
                        zip(self.net_.parameter_arrays(), self.net_.gradient_arrays())):
                    new, states[i] = adam_step(param, grad, states[i], self.lr)
                    param[...] = new
        self.loss_history_ = losses
        report = {"train_accuracy": float(self.score(images, labels))}
        if validation is not None:
            val_x, val_y = validation
            report["val_accuracy"] = float(self.score(val_x, val_y))
        self.train_report_ = report
        return self

    def predict_proba(self, images):
        images = self._check_images(images)
        out = np.empty((images.shape[0], self.net_.class_count))
        for start in range(0, images.shape[0], 64):
            out[start:start + 64] = self.net_.predict_proba(images[start:start + 64])
        return out

    def predict(self, images):
        # np.argmax breaks ties toward the lowest index, i.e. lowest class id
        return self.classes_[np.argmax(self.predict_proba(images), axis=1)]

    def score(self, images, labels):
        return float(np.mean(self.predict(images) == np.asarray(labels)))

    def class_index(self, label):
        idx = np.searchsorted(self.classes_, label)
        if idx >= self.classes_.size or self.classes_[idx] != label:
            raise InputError(f"unknown class label {label!r}")
        return int(idx)

    def input_gradient(self, image, label):
        """(d log f_s / d image, f_s) for a single (H, W, 3) image."""
        grad, f = self.net_.input_gradient(image[np.newaxis],
                                           self.class_index(label))
        return np.asarray(grad[0], dtype=np.float64), float(f[0])


# ---------------------------------------------------------------------------
# Preprocessing
# ---------------------------------------------------------------------------

class PreprocessSpec:
    """Resize to a square then crop the center (e.g. 72 -> 64)."""

    def __init__(self, resize_to=72, center_crop=64):
        if center_crop > resize_to:
            raise ValueError("center_crop must be <= resize_to")
        self.resize_to = int(resize_to)
        self.center_crop = int(center_crop)

    def to_dict(self):
        return {"resize_to": self.resize_to, "center_crop": self.center_crop}

    @staticmethod
    def from_dict(d):
        return PreprocessSpec(**d)

    def __eq__(self, other):
        return (isinstance(other, PreprocessSpec)
                and self.to_dict() == other.to_dict())


def bilinear_resize(image, out_h, out_w):
    """Separable bilinear resize with half-pixel centers and edge clamp.

    Resizing to the input size is an exact identity.
    """
    image = np.asarray(image, dtype=np.float64)
    in_h, in_w = image.shape[:2]

    def axis_coords(n_in, n_out):
        src = (np.arange(n_out) + 0.5) * (n_in / n_out) - 0.5
        src = np.clip(src, 0.0, n_in - 1.0)
        lo = np.floor(src).astype(int)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, (src - lo)

    y0, y1, wy = axis_coords(in_h, out_h)
    x0, x1, wx = axis_coords(in_w, out_w)
    rows = image[y0] * (1.0 - wy)[:, None, None] + image[y1] * wy[:, None, None]
    return (rows[:, x0] * (1.0 - wx)[None, :, None]
            + rows[:, x1] * wx[None, :, None])


def preprocess(raw_image, spec):
    """Resize then center-crop a raw (H, W, 3) image in [0, 1]."""
    raw = np.asarray(raw_image, dtype=np.float64)
    if raw.ndim != 3 or raw.shape[2] != 3:
        raise InputError(f"raw image must be (H, W, 3), got {raw.shape}")
    if raw.shape[0] < 8 or raw.shape[1] < 8:
        raise InputError("raw image must be at least 8x8")
    resized = bilinear_resize(raw, spec.resize_to, spec.resize_to)
    off = (spec.resize_to - spec.center_crop) // 2
    out = resized[off:off + spec.center_crop, off:off + spec.center_crop]
    return np.clip(out, 0.0, 1.0)


# ---------------------------------------------------------------------------
# Serialization
# ---------------------------------------------------------------------------

def save_model(model, path):
    """Write a fitted TinyConvNet to the versioned binary container."""
    params = model.net_.parameter_arrays()
    header = {
        "arch_id": model.net_.arch_id,
        "input_size": model.net_.input_size,
        "class_count": model.net_.class_count,
        "classes": [int(c) for c in model.classes_],
        "param_shapes": [list(p.shape) for p in params],
        "train_report": getattr(model, "train_report_", {}),
    }
    header_bytes = json.dumps(header, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MODEL_MAGIC)
    buf.write(struct.pack("<I", MODEL_VERSION))
    buf.write(struct.pack("<I", len(header_bytes)))
    buf.write(header_bytes)
    for p in params:
        buf.write(np.ascontiguousarray(p, dtype="<f4").tobytes())
    payload = buf.getvalue()
    digest = hashlib.sha256(payload).digest()
    with open(path, "wb") as fh:
        fh.write(payload)
        fh.write(digest)


def load_model(path, expected_arch_id=None):
    """Load a TinyConvNet; verifies magic, version, and checksum."""
    with open(path, "rb") as fh:
        data = fh.read()
    if len(data) < 44 or data[:4] != MODEL_MAGIC:
        raise CorruptFileError(f"{path}: not a model file (bad magic)")
    payload, digest = data[:-32], data[-32:]
    if hashlib.sha256(payload).digest() != digest:
        raise CorruptFileError(f"{path}: checksum mismatch (truncated or edited)")
    version = struct.unpack("<I", payload[4:8])[0]
    if version != MODEL_VERSION:
        raise SchemaVersionError(f"{path}: unsupported model version {version}")
    header_len = struct.unpack("<I", payload[8:12])[0]
    header = json.loads(payload[12:12 + header_len].decode("utf-8"))
    if expected_arch_id is not None and header["arch_id"] != expected_arch_id:
        raise ArchMismatchError(
            f"{path}: contains {header['arch_id']!r}, expected {expected_arch_id!r}")

    model = TinyConvNet(arch=header["arch_id"], input_size=header["input_size"])
    model.classes_ = np.asarray(header["classes"])
    model.net_ = build_network(header["arch_id"], header["class_count"],
                               header["input_size"], np.random.default_rng(0))
    model.train_report_ = header.get("train_report", {})
    offset = 12 + header_len
    arrays = []
    for shape in header["param_shapes"]:
        count = int(np.prod(shape))
        blob = payload[offset:offset + 4 * count]
        if len(blob) != 4 * count:
            raise CorruptFileError(f"{path}: weight blob truncated")
        arrays.append(np.frombuffer(blob, dtype="<f4").reshape(shape))
        offset += 4 * count
    if offset != len(payload):
        raise CorruptFileError(f"{path}: trailing bytes after weights")
    model.net_.set_parameters(arrays)
    return model
