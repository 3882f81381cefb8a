"""Dataset ingestion and generation.

Covers the big-endian IDX image/label format, a deterministic synthetic
multi-factor image generator with known ground-truth facets (glyph shape,
foreground intensity band, optional position quadrant), and stratified
train/test splitting.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    images: np.ndarray                  # (N, D) float64 in [0, 1]
    labels: dict = field(default_factory=dict)  # name -> (N,) int array
    split: str = ""

    def __post_init__(self):
        self.images = np.asarray(self.images, dtype=np.float64)
        if self.images.ndim != 2:
            raise ValueError("images must be a (N, D) matrix")
        if np.any(self.images < 0.0) or np.any(self.images > 1.0):
            raise ValueError("pixel values must lie in [0, 1]")
        for name, col in self.labels.items():
            col = np.asarray(col)
            if col.shape != (len(self.images),):
                raise ValueError(
                    f"label column {name!r} has length {col.shape}, "
                    f"expected ({len(self.images)},)")
            self.labels[name] = col.astype(np.int64)

    def __len__(self):
        return len(self.images)

    def subset(self, indices, split=None):
        return Dataset(self.images[indices],
                       {k: v[indices] for k, v in self.labels.items()},
                       split if split is not None else self.split)


# -- IDX format -----------------------------------------------------------------


def _read_idx_images(path):
    with open(path, "rb") as fh:
        header = fh.read(16)
        if len(header) < 16:
            raise ValueError(f"{path}: truncated IDX header")
        magic, n, rows, cols = struct.unpack(">IIII", header)
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(
                f"{path}: bad images magic 0x{magic:08x}, expected 0x{IDX_IMAGES_MAGIC:08x}")
        payload = fh.read(n * rows * cols)
        if len(payload) != n * rows * cols:
            raise ValueError(f"{path}: truncated image payload "
                             f"({len(payload)} of {n * rows * cols} bytes)")
    pixels = np.frombuffer(payload, dtype=np.uint8).reshape(n, rows * cols)
    return pixels.astype(np.float64) / 255.0


def _read_idx_labels(path):
    with open(path, "rb") as fh:
        header = fh.read(8)
        if len(header) < 8:
            raise ValueError(f"{path}: truncated IDX header")
        magic, n = struct.unpack(">II", header)
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(
                f"{path}: bad labels magic 0x{magic:08x}, expected 0x{IDX_LABELS_MAGIC:08x}")
        payload = fh.read(n)
        if len(payload) != n:
            raise ValueError(f"{path}: truncated label payload")
    return np.frombuffer(payload, dtype=np.uint8).astype(np.int64)


def load_idx(images_path, labels_path=None, label_name="class", split=""):
    """Parse big-endian IDX files into a min-max scaled Dataset."""
    images = _read_idx_images(images_path)
    labels = {}
    if labels_path is not None:
        col = _read_idx_labels(labels_path)
        if len(col) != len(images):
            raise ValueError(
                f"label count {len(col)} != image count {len(images)}")
        labels[label_name] = col
    return Dataset(images, labels, split)


def save_idx(dataset: Dataset, images_path, labels_path=None, label_name="class",
             image_side=None):
    """Write a Dataset back to IDX (pixels rounded to the uint8 grid)."""
    n, d = dataset.images.shape
    side = image_side or int(round(np.sqrt(d)))
    if side * side != d:
        raise ValueError(f"cannot infer square image side from D={d}")
    pixels = np.round(dataset.images * 255.0).astype(np.uint8)
    with open(images_path, "wb") as fh:
        fh.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, side, side))
        fh.write(pixels.tobytes())
    if labels_path is not None:
        col = dataset.labels[label_name].astype(np.uint8)
        with open(labels_path, "wb") as fh:
            fh.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
            fh.write(col.tobytes())


# -- synthetic multi-factor generator ------------------------------------------------


@dataclass
class SynthFactorSpec:
    factors: list                      # [(name, cardinality), ...]
    image_side: int = 16
    noise_sigma: float = 0.05
    samples_per_combo: int = 50

    def __post_init__(self):
        if self.image_side < 8:
            raise ValueError("image_side must be >= 8")
        if any(card < 1 for _, card in self.factors):
            raise ValueError("factor cardinalities must be >= 1")


def _stencils(side):
    """Fixed glyph inventory rendered on a side x side grid.

    Ordered so the leading glyphs (the ones a low-cardinality shape factor
    uses) are maximally mutually distant in pixel space.
    """
    s = side
    q, t = s // 4, max(1, s // 8)

    filled = np.zeros((s, s))
    filled[q:s - q, q:s - q] = 1.0

    hollow = filled.copy()
    hollow[q + t:s - q - t, q + t:s - q - t] = 0.0

    plus = np.zeros((s, s))
    mid = s // 2
    plus[mid - t:mid + t, q:s - q] = 1.0
    plus[q:s - q, mid - t:mid + t] = 1.0

    cross = np.zeros((s, s))
    for i in range(q, s - q):
        for w in range(-t + 1, t):
            cross[i, np.clip(i + w, 0, s - 1)] = 1.0
            cross[i, np.clip(s - 1 - i + w, 0, s - 1)] = 1.0

    yy, xx = np.mgrid[0:s, 0:s]
    r = (s - 2 * q) / 2.0
    dist = np.sqrt((yy - (s - 1) / 2.0) ** 2 + (xx - (s - 1) / 2.0) ** 2)
    ring = ((dist <= r) & (dist >= r - 1.5 * t)).astype(float)

    hbars = np.zeros((s, s))
    for row in range(q, s - q, 2 * t):
        hbars[row:row + t, q:s - q] = 1.0
    vbars = hbars.T.copy()

    tri = np.zeros((s, s))
    for i in range(q, s - q):
        half = (i - q + 1) * (s - 2 * q) // (2 * (s - 2 * q))
        lo, hi = s // 2 - half, s // 2 + half + 1
        tri[i, lo:hi] = 1.0

    return [hollow, cross, hbars, vbars, filled, plus, ring, tri]


def render_template(spec: SynthFactorSpec, combo):
    """Noiseless image for one factor combination."""
    side = spec.image_side
    glyphs = _stencils(side)
    values = dict(zip([name for name, _ in spec.factors], combo))
    cards = dict(spec.factors)

    shape_idx = values.get("shape", 0)
    if "shape" in cards and cards["shape"] > len(glyphs):
        raise ValueError(f"shape cardinality {cards['shape']} exceeds the "
                         f"stencil inventory of {len(glyphs)}")
    glyph = glyphs[shape_idx]

    if "intensity" in values:
        m = cards["intensity"]
        levels = np.linspace(0.45, 1.0, m) if m > 1 else np.array([1.0])
        glyph = glyph * levels[values["intensity"]]

    if "position" in values and cards["position"] > 1:
        if cards["position"] > 4:
            raise ValueError("position factor supports at most 4 quadrants")
        quad = values["position"]
        shifted = np.zeros_like(glyph)
        dy = -side // 4 if quad in (0, 1) else side // 4
        dx = -side // 4 if quad in (0, 2) else side // 4
        src = glyph
        shifted = np.roll(np.roll(src, dy, axis=0), dx, axis=1)
        glyph = shifted

    return glyph


def synth_generate(spec: SynthFactorSpec, rng) -> Dataset:
    """Render every factor combination ``samples_per_combo`` times with
    clamped Gaussian pixel noise; all factors become label columns."""
    names = [name for name, _ in spec.factors]
    cards = [card for _, card in spec.factors]
    combos = np.stack(np.meshgrid(*[np.arange(c) for c in cards],
                                  indexing="ij"), axis=-1).reshape(-1, len(cards))
    images, label_rows = [], []
    for combo in combos:
        template = render_template(spec, tuple(combo)).ravel()
        for _ in range(spec.samples_per_combo):
            noisy = template + rng.normal(0.0, spec.noise_sigma, size=template.shape) \
                if spec.noise_sigma > 0 else template.copy()
            images.append(np.clip(noisy, 0.0, 1.0))
            label_rows.append(combo)
    labels = {name: np.array([row[i] for row in label_rows])
              for i, name in enumerate(names)}
    return Dataset(np.stack(images), labels, split="all")


def nearest_template_labels(spec: SynthFactorSpec, images):
    """Classify images by nearest noiseless template (upper-bound oracle)."""
    names = [name for name, _ in spec.factors]
    cards = [card for _, card in spec.factors]
    combos = np.stack(np.meshgrid(*[np.arange(c) for c in cards],
                                  indexing="ij"), axis=-1).reshape(-1, len(cards))
    templates = np.stack([render_template(spec, tuple(c)).ravel() for c in combos])
    d2 = ((np.asarray(images)[:, None, :] - templates[None]) ** 2).sum(axis=-1)
    best = np.argmin(d2, axis=-1)
    return {name: combos[best][:, i] for i, name in enumerate(names)}


# -- splitting ---------------------------------------------------------------------


def split(dataset: Dataset, train_frac, seed):
    """Seeded split without replacement, stratified by the joint factor
    combination when label columns exist."""
    if not 0.0 < train_frac < 1.0:
        raise ValueError("train_frac must lie strictly between 0 and 1")
    n = len(dataset)
    rng = np.random.default_rng(seed)

    if dataset.labels:
        keys = np.stack([col for col in dataset.labels.values()], axis=-1)
        _, group_ids = np.unique(keys, axis=0, return_inverse=True)
    else:
        group_ids = np.zeros(n, dtype=np.int64)

    train_idx, test_idx = [], []
    for g in np.unique(group_ids):
        members = np.flatnonzero(group_ids == g)
        members = members[rng.permutation(len(members))]
        k = int(round(train_frac * len(members)))
        if len(members) >= 2:
            k = min(max(k, 1), len(members) - 1)
        train_idx.append(members[:k])
        test_idx.append(members[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    test_idx = np.sort(np.concatenate(test_idx))
    if len(train_idx) == 0 or len(test_idx) == 0:
        raise ValueError(f"train_frac {train_frac} produces an empty split")
    return dataset.subset(train_idx, "train"), dataset.subset(test_idx, "test")
