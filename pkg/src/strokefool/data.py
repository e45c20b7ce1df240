"""Dataset handling: directory-per-class PNG trees plus a synthetic
shape generator so the whole pipeline runs without downloads.

The generator renders five geometric classes (cross, disk, ring, square,
triangle) with randomized pose, size, colors, and noise.  Class ids are
1-based indices into the lexicographically sorted class names.
"""

import os
from dataclasses import dataclass, field

import numpy as np
from PIL import Image

from .errors import DatasetError

SPLIT_NAMES = ("train", "val", "pool")


# ---------------------------------------------------------------------------
# PNG I/O
# ---------------------------------------------------------------------------

def load_image(path):
    """Read a PNG into an (H, W, 3) float array in [0, 1]."""
    try:
        with Image.open(path) as img:
            rgb = img.convert("RGB")
            return np.asarray(rgb, dtype=np.float64) / 255.0
    except OSError as exc:
        raise DatasetError(f"unreadable image {path}: {exc}") from exc


def save_png(path, pixels):
    """Write an (H, W, 3) float array in [0, 1] as an 8-bit PNG."""
    arr = np.clip(np.asarray(pixels), 0.0, 1.0)
    data = np.rint(arr * 255.0).astype(np.uint8)
    Image.fromarray(data, mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------------------
# Manifest
# ---------------------------------------------------------------------------

@dataclass
class DatasetManifest:
    root: str
    classes: list            # sorted names; class id = index + 1
    files: dict              # class name -> sorted relative paths
    splits: dict = field(default_factory=dict)  # split -> [(relpath, class_id)]

    def class_id(self, name):
        return self.classes.index(name) + 1

    def class_name(self, class_id):
        return self.classes[class_id - 1]

    def split_items(self, split):
        return list(self.splits[split])

    def path(self, relpath):
        return os.path.join(self.root, relpath)


def scan_dataset(root, seed=0, fractions=(0.7, 0.15, 0.15)):
    """Build a manifest with a seeded train/val/pool split.

    Deterministic: classes and files are sorted lexicographically and the
    split permutation depends only on the seed.
    """
    if not os.path.isdir(root):
        raise DatasetError(f"dataset root {root!r} does not exist")
    if len(fractions) != 3 or abs(sum(fractions) - 1.0) > 1e-9:
        raise DatasetError("fractions must be three numbers summing to 1")
    class_dirs = sorted(d for d in os.listdir(root)
                        if os.path.isdir(os.path.join(root, d)))
    if len(class_dirs) < 2:
        raise DatasetError("need at least 2 class directories")
    lowered = [c.lower() for c in class_dirs]
    if len(set(lowered)) != len(lowered):
        raise DatasetError("duplicate class names (case-insensitive)")

    files = {}
    for cls in class_dirs:
        entries = sorted(f for f in os.listdir(os.path.join(root, cls))
                         if f.lower().endswith(".png"))
        if not entries:
            raise DatasetError(f"class directory {cls!r} has no PNG images")
        for f in entries:
            path = os.path.join(root, cls, f)
            try:
                with Image.open(path) as img:
                    img.verify()
            except OSError as exc:
                raise DatasetError(f"unreadable image {path}: {exc}") from exc
        files[cls] = [os.path.join(cls, f) for f in entries]

    rng = np.random.default_rng(seed)
    splits = {name: [] for name in SPLIT_NAMES}
    for cls in class_dirs:
        class_id = class_dirs.index(cls) + 1
        perm = rng.permutation(len(files[cls]))
        n = len(perm)
        cuts = [int(round(sum(fractions[:i + 1]) * n)) for i in range(3)]
        bounds = [(0, cuts[0]), (cuts[0], cuts[1]), (cuts[1], cuts[2])]
        for split, (lo, hi) in zip(SPLIT_NAMES, bounds):
            for idx in perm[lo:hi]:
                splits[split].append((files[cls][idx], class_id))
    for split in SPLIT_NAMES:
        splits[split].sort()
    return DatasetManifest(root=str(root), classes=class_dirs, files=files,
                           splits=splits)


def load_split(manifest, split, spec=None):
    """Load one split as (images, labels); optionally preprocessed."""
    from .classifier import preprocess

    images, labels = [], []
    for relpath, class_id in manifest.split_items(split):
        img = load_image(manifest.path(relpath))
        if spec is not None:
            img = preprocess(img, spec)
        images.append(img)
        labels.append(class_id)
    return np.array(images), np.array(labels)


# ---------------------------------------------------------------------------
# Synthetic shapes
# ---------------------------------------------------------------------------

SHAPE_CLASSES = ("cross", "disk", "ring", "square", "triangle")


def _shape_sdf(name, px, py, size, rng):
    """Signed distance (negative inside) of one randomized shape at origin."""
    if name == "disk":
        return np.hypot(px, py) - size
    if name == "ring":
        thickness = rng.uniform(0.22, 0.34) * size
        return np.abs(np.hypot(px, py) - size * 0.82) - thickness
    if name == "square":
        return np.maximum(np.abs(px), np.abs(py)) - size * 0.9
    if name == "cross":
        arm = size * rng.uniform(0.28, 0.38)
        bar_a = np.maximum(np.abs(px) - size, np.abs(py) - arm)
        bar_b = np.maximum(np.abs(px) - arm, np.abs(py) - size)
        return np.minimum(bar_a, bar_b)
    if name == "triangle":
        # equilateral: intersection of three half-planes around the centroid
        r = size * 1.05
        sdf = np.full_like(px, -np.inf)
        for ang in (np.pi / 2, np.pi / 2 + 2 * np.pi / 3, np.pi / 2 + 4 * np.pi / 3):
            nx, ny = np.cos(ang), np.sin(ang)
            sdf = np.maximum(sdf, px * nx + py * ny - r * 0.5)
        return sdf
    raise ValueError(f"unknown shape {name!r}")


def render_shape(name, canvas=96, rng=None):
    """One randomized training image of the given shape class.

    Pose varies by jitter, size, and a mild tilt; orientation is kept
    near-canonical so the classes stay learnable for very small nets.
    """
    rng = rng or np.random.default_rng(0)
    ys, xs = np.mgrid[0:canvas, 0:canvas]
    cx = canvas / 2 + rng.uniform(-0.08, 0.08) * canvas
    cy = canvas / 2 + rng.uniform(-0.08, 0.08) * canvas
    size = rng.uniform(0.18, 0.26) * canvas
    theta = rng.uniform(-0.18, 0.18)
    c, s = np.cos(theta), np.sin(theta)
    px = c * (xs - cx) + s * (ys - cy)
    py = -s * (xs - cx) + c * (ys - cy)
    sdf = _shape_sdf(name, px, py, size, rng)
    alpha = np.clip(0.5 - sdf / 1.2, 0.0, 1.0)

    # light background with a gentle gradient, clearly darker foreground
    bg = rng.uniform(0.62, 0.92, size=3)
    slope = rng.uniform(-0.1, 0.1, size=2)
    backdrop = bg + slope[0] * (xs[..., None] / canvas - 0.5) \
        + slope[1] * (ys[..., None] / canvas - 0.5)
    fg = rng.uniform(0.05, 0.32, size=3)
    img = backdrop * (1.0 - alpha[..., None]) + fg * alpha[..., None]
    img += rng.normal(scale=0.035, size=img.shape)
    return np.clip(img, 0.0, 1.0)


def generate_shape_dataset(root, per_class=120, canvas=96, seed=0,
                           classes=SHAPE_CLASSES):
    """Write the synthetic dataset tree; returns the number of images."""
    rng = np.random.default_rng(seed)
    os.makedirs(root, exist_ok=True)
    count = 0
    for name in classes:
        class_dir = os.path.join(root, name)
        os.makedirs(class_dir, exist_ok=True)
        for i in range(per_class):
            img = render_shape(name, canvas=canvas, rng=rng)
            save_png(os.path.join(class_dir, f"{name}_{i:04d}.png"), img)
            count += 1
    return count
