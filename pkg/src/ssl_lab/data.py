"""Synthetic analog of an imbalanced anatomy dataset, plus on-disk IO.

Nine "distinct" classes are unrelated parametric shapes. Four "cardiac"
classes share one base shape (an outer ring with an inner disk) and differ
only in the inner-disk radius relative to the ring, with enough jitter that
neighbouring variants overlap. The background class mixes heterogeneous
texture fields with heavily distorted lookalikes of the anatomical classes.

Disk layout::

    root/manifest.csv                 # "# classes=a;b;..." then path,label,split
    root/{train,test}/<class>/img_#####.pgm
"""
from __future__ import annotations

import csv
import hashlib
import io
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage

SPLITS = ("train", "test")
BACKGROUND = "background"
CLUSTER_PREFIX = "cardiac_"


@dataclass(frozen=True)
class DatasetSpec:
    num_distinct_classes: int = 9
    confusable_cluster_size: int = 4
    include_background: bool = True
    train_per_class: int = 200
    test_per_class: int = 60
    background_train: int = 600
    background_test: int = 180
    # class name -> (train, test) overrides
    images_per_class: dict = field(default_factory=dict)
    image_size: tuple[int, int] = (32, 32)
    noise_sigma: float = 0.12
    lookalike_prob: float = 0.15
    seed: int = 0

    def __post_init__(self):
        if self.num_distinct_classes < 0 or self.num_distinct_classes > len(_DISTINCT_SHAPES):
            raise ValueError(f"num_distinct_classes must lie in [0, {len(_DISTINCT_SHAPES)}]")
        if self.confusable_cluster_size < 0 or self.confusable_cluster_size > 8:
            raise ValueError("confusable_cluster_size must lie in [0, 8]")
        if self.num_distinct_classes + self.confusable_cluster_size == 0:
            raise ValueError("dataset needs at least one anatomical class")
        h, w = self.image_size
        if h < 8 or w < 8:
            raise ValueError(f"image_size too small: {self.image_size}")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be non-negative")
        if not 0 <= self.lookalike_prob <= 1:
            raise ValueError("lookalike_prob must lie in [0, 1]")
        names = set(self.class_names)
        for name, counts in self.images_per_class.items():
            if name not in names:
                raise ValueError(f"images_per_class names unknown class {name!r}")
            if len(counts) != 2 or min(counts) < 0:
                raise ValueError(f"images_per_class[{name!r}] must be a (train, test) pair of counts")
        if self.include_background:
            bg_train = self.counts(BACKGROUND)[0]
            top = max(self.counts(n)[0] for n in self.class_names if n != BACKGROUND)
            if bg_train < top:
                raise ValueError(f"background train count {bg_train} is below the largest anatomical count {top}")

    @property
    def class_names(self) -> list[str]:
        names = [f"distinct_{i}" for i in range(self.num_distinct_classes)]
        names += [f"{CLUSTER_PREFIX}{i}" for i in range(self.confusable_cluster_size)]
        if self.include_background:
            names.append(BACKGROUND)
        return names

    def counts(self, name: str) -> tuple[int, int]:
        if name in self.images_per_class:
            return tuple(self.images_per_class[name])
        if name == BACKGROUND:
            return self.background_train, self.background_test
        return self.train_per_class, self.test_per_class


@dataclass
class Dataset:
    images: np.ndarray  # (N, H, W) float32 in [0, 1]
    labels: np.ndarray  # (N,) int64
    split: np.ndarray  # (N,) "train" | "test"
    class_names: list[str]
    ids: np.ndarray = None  # stable per-sample ids, used to key augmentation streams

    def __post_init__(self):
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.split = np.asarray(self.split, dtype="<U5")
        if self.ids is None:
            self.ids = np.arange(len(self.labels), dtype=np.int64)
        if not (len(self.images) == len(self.labels) == len(self.split) == len(self.ids)):
            raise ValueError("images, labels, split and ids must have equal length")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= len(self.class_names)):
            raise ValueError("label outside the class list")

    def __len__(self) -> int:
        return len(self.labels)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Dataset):
            return NotImplemented
        return (
            self.class_names == other.class_names
            and np.array_equal(self.labels, other.labels)
            and np.array_equal(self.split, other.split)
            and np.array_equal(self.images, other.images)
        )

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def background_index(self) -> int | None:
        return self.class_names.index(BACKGROUND) if BACKGROUND in self.class_names else None

    @property
    def cluster_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.class_names) if n.startswith(CLUSTER_PREFIX)]

    @property
    def distinct_indices(self) -> list[int]:
        return [i for i, n in enumerate(self.class_names) if n.startswith("distinct_")]

    def select(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return Dataset(self.images[mask], self.labels[mask], self.split[mask], list(self.class_names), self.ids[mask])

    @property
    def train(self) -> "Dataset":
        return self.select(self.split == "train")

    @property
    def test(self) -> "Dataset":
        return self.select(self.split == "test")

    def without_background(self) -> "Dataset":
        bg = self.background_index
        if bg is None:
            return self
        if bg != self.num_classes - 1:
            raise ValueError("background must be the last class")
        sub = self.select(self.labels != bg)
        sub.class_names = self.class_names[:-1]
        return sub

    def class_counts(self) -> dict[str, int]:
        counts = np.bincount(self.labels, minlength=self.num_classes)
        return {n: int(c) for n, c in zip(self.class_names, counts)}

    def content_hash(self) -> str:
        h = hashlib.sha256()
        h.update(";".join(self.class_names).encode())
        h.update(self.labels.astype("<i8").tobytes())
        h.update(np.round(self.images * 255).astype(np.uint8).tobytes())
        return h.hexdigest()[:16]


# ---------------------------------------------------------------------------
# shape rendering
# ---------------------------------------------------------------------------
def _soft(d: np.ndarray, width: float = 0.6) -> np.ndarray:
    """Soft inside-indicator of a signed distance (negative inside)."""
    return 1.0 / (1.0 + np.exp(np.clip(d / width, -50, 50)))


def _ellipse(u, v):
    r = np.sqrt((u / 9.5) ** 2 + (v / 4.5) ** 2)
    return _soft((r - 1.0) * 4.5)


def _bar(u, v):
    return _soft(np.maximum(np.abs(u) - 11.0, np.abs(v) - 2.2))


def _ring(u, v):
    return _soft(np.abs(np.hypot(u, v) - 8.5) - 1.6)


def _cross(u, v):
    a = np.maximum(np.abs(u) - 10.0, np.abs(v) - 1.8)
    b = np.maximum(np.abs(u) - 1.8, np.abs(v) - 10.0)
    return _soft(np.minimum(a, b))


def _checker(u, v):
    disk = _soft(np.hypot(u, v) - 10.0)
    pattern = 0.5 + 0.5 * np.sign(np.sin(u * math.pi / 3.2) * np.sin(v * math.pi / 3.2))
    return disk * pattern


def _triangle(u, v):
    d = -np.inf
    for k in range(3):
        a = 2 * math.pi * k / 3 + math.pi / 2
        d = np.maximum(d, u * math.cos(a) + v * math.sin(a) - 5.0)
    return _soft(d)


def _dumbbell(u, v):
    blobs = np.minimum(np.hypot(u - 6.5, v) - 3.8, np.hypot(u + 6.5, v) - 3.8)
    bar = np.maximum(np.abs(u) - 6.5, np.abs(v) - 1.0)
    return _soft(np.minimum(blobs, bar))


def _frame(u, v):
    return _soft(np.abs(np.maximum(np.abs(u), np.abs(v)) - 8.0) - 1.4)


def _crescent(u, v):
    return _soft(np.maximum(np.hypot(u, v) - 9.0, -(np.hypot(u - 4.5, v) - 7.5)))


_DISTINCT_SHAPES = (_ellipse, _bar, _ring, _cross, _checker, _triangle, _dumbbell, _frame, _crescent)

# inner-disk radius of cluster variant k, as a fraction of the outer ring radius
CLUSTER_RATIO_BASE = 0.30
CLUSTER_RATIO_STEP = 0.06
CLUSTER_RATIO_JITTER = 0.05
CLUSTER_RING_RADIUS = 9.5


def _cluster_shape(k: int, rng: np.random.Generator):
    ratio = CLUSTER_RATIO_BASE + CLUSTER_RATIO_STEP * k + rng.uniform(-CLUSTER_RATIO_JITTER, CLUSTER_RATIO_JITTER)

    def shape(u, v):
        r = np.hypot(u, v)
        ring = _soft(np.abs(r - CLUSTER_RING_RADIUS) - 1.3)
        inner = _soft(r - ratio * CLUSTER_RING_RADIUS)
        return np.maximum(ring, 0.85 * inner)

    return shape


def _grid(size):
    h, w = size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    return yy - (h - 1) / 2, xx - (w - 1) / 2


def _render(shape, size, rng, *, offset=1.75, scale=(0.85, 1.15), angle=0.45, intensity=(0.55, 1.0)):
    yy, xx = _grid(size)
    factor = min(size) / 32.0
    dy, dx = rng.uniform(-offset, offset, 2) * factor
    s = rng.uniform(*scale) * factor
    theta = rng.uniform(-angle, angle)
    c, sn = math.cos(theta), math.sin(theta)
    x0, y0 = xx - dx, yy - dy
    u = (x0 * c + y0 * sn) / s
    v = (-x0 * sn + y0 * c) / s
    return shape(u, v) * rng.uniform(*intensity)


def _finish(img: np.ndarray, rng: np.random.Generator, sigma: float) -> np.ndarray:
    """Speckle, additive noise, faint haze; clip and quantise to 8 bits."""
    h, w = img.shape
    haze = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), 4.0)
    haze = 0.08 + 0.06 * haze / (np.abs(haze).max() + 1e-9)
    speckle = rng.gamma(8.0, 1.0 / 8.0, (h, w))
    out = img * speckle + haze + rng.normal(0, sigma, (h, w))
    return np.round(np.clip(out, 0.0, 1.0) * 255.0) / 255.0


def _texture(size, rng):
    """One of several unrelated clutter patterns."""
    h, w = size
    kind = rng.integers(4)
    if kind == 0:
        field = ndimage.gaussian_filter(rng.normal(0, 1, (h, w)), rng.uniform(1.0, 4.0))
        field = (field - field.min()) / (np.ptp(field) + 1e-9)
        return field * rng.uniform(0.4, 0.9)
    if kind == 1:
        yy, xx = _grid(size)
        out = np.zeros(size)
        for _ in range(rng.integers(2, 6)):
            a = rng.uniform(0, math.pi)
            d = xx * math.cos(a) + yy * math.sin(a) - rng.uniform(-12, 12)
            out = np.maximum(out, _soft(np.abs(d) - rng.uniform(0.5, 2.0)) * rng.uniform(0.3, 0.9))
        return out
    if kind == 2:
        yy, xx = _grid(size)
        out = np.zeros(size)
        for _ in range(rng.integers(3, 10)):
            cy, cx = rng.uniform(-14, 14, 2)
            out = np.maximum(out, _soft(np.hypot(yy - cy, xx - cx) - rng.uniform(1.0, 4.0)) * rng.uniform(0.3, 1.0))
        return out
    yy, xx = _grid(size)
    cy, cx = rng.uniform(-10, 10, 2)
    r = np.hypot(yy - cy, xx - cx)
    a = np.arctan2(yy - cy, xx - cx)
    start = rng.uniform(-math.pi, math.pi)
    arc = _soft(np.abs(r - rng.uniform(5, 14)) - rng.uniform(0.8, 2.0))
    return arc * (np.cos(a - start) > rng.uniform(-0.3, 0.6)) * rng.uniform(0.4, 0.9)


def _anatomical_shape(spec: DatasetSpec, label: int, rng):
    if label < spec.num_distinct_classes:
        return _DISTINCT_SHAPES[label]
    return _cluster_shape(label - spec.num_distinct_classes, rng)


def _sample(spec: DatasetSpec, label: int, rng: np.random.Generator) -> np.ndarray:
    size = spec.image_size
    n_anat = spec.num_distinct_classes + spec.confusable_cluster_size
    if label < n_anat:
        img = _render(_anatomical_shape(spec, label, rng), size, rng)
        return _finish(img, rng, spec.noise_sigma)
    # background
    if rng.random() < spec.lookalike_prob:
        mimic = int(rng.integers(n_anat))
        img = _render(_anatomical_shape(spec, mimic, rng), size, rng,
                      offset=7.0, scale=(0.6, 1.5), angle=math.pi, intensity=(0.3, 0.7))
        img = np.maximum(img, 0.6 * _texture(size, rng))
        return _finish(img, rng, spec.noise_sigma * 1.5)
    img = _texture(size, rng)
    if rng.random() < 0.5:
        img = np.maximum(img, _texture(size, rng))
    return _finish(img, rng, spec.noise_sigma)


def generate(spec: DatasetSpec) -> Dataset:
    """Deterministic in ``spec.seed``; each sample owns a derived random stream."""
    images, labels, splits = [], [], []
    for split_code, split in enumerate(SPLITS):
        for label, name in enumerate(spec.class_names):
            count = spec.counts(name)[split_code]
            for k in range(count):
                rng = np.random.default_rng([spec.seed, split_code, label, k])
                images.append(_sample(spec, label, rng))
                labels.append(label)
                splits.append(split)
    h, w = spec.image_size
    stack = np.asarray(images, dtype=np.float32).reshape(-1, h, w)
    return Dataset(stack, np.asarray(labels), np.asarray(splits), spec.class_names)


def subset_labels(ds: Dataset, per_class: int, seed: int) -> tuple[Dataset, Dataset]:
    """Stratified split of the training samples into a labelled and an unlabelled pool."""
    train = ds.train if (ds.split == "test").any() else ds
    if per_class < 1:
        raise ValueError(f"per_class must be positive, got {per_class}")
    rng = np.random.default_rng([seed, 7919])
    chosen = np.zeros(len(train), dtype=bool)
    for c in range(train.num_classes):
        members = np.flatnonzero(train.labels == c)
        if per_class > len(members):
            raise ValueError(
                f"label budget {per_class} exceeds the {len(members)} training images of class {train.class_names[c]!r}"
            )
        chosen[rng.choice(members, size=per_class, replace=False)] = True
    return train.select(chosen), train.select(~chosen)


# ---------------------------------------------------------------------------
# disk IO
# ---------------------------------------------------------------------------
def write_pgm(path: Path, image: np.ndarray) -> None:
    data = np.round(np.clip(image, 0, 1) * 255).astype(np.uint8)
    h, w = data.shape
    path.write_bytes(b"P5\n%d %d\n255\n" % (w, h) + data.tobytes())


def read_pgm(path: Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while pos < len(raw) and raw[pos:pos + 1].isspace():
            pos += 1
        if raw[pos:pos + 1] == b"#":
            while pos < len(raw) and raw[pos:pos + 1] not in (b"\n", b"\r"):
                pos += 1
            continue
        start = pos
        while pos < len(raw) and not raw[pos:pos + 1].isspace():
            pos += 1
        if start == pos:
            raise ValueError(f"{path}: truncated PGM header")
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5":
        raise ValueError(f"{path}: not a binary PGM (P5) file")
    w, h, maxval = (int(t) for t in tokens[1:])
    if maxval != 255:
        raise ValueError(f"{path}: only 8-bit PGM is supported")
    pos += 1  # single whitespace after maxval
    body = raw[pos:pos + w * h]
    if len(body) != w * h:
        raise ValueError(f"{path}: expected {w * h} pixel bytes, found {len(body)}")
    return np.frombuffer(body, dtype=np.uint8).reshape(h, w).astype(np.float32) / 255.0


def save(root, ds: Dataset) -> Path:
    root = Path(root)
    root.mkdir(parents=True, exist_ok=True)
    rows = []
    counters: dict[tuple[str, int], int] = {}
    for img, label, split in zip(ds.images, ds.labels, ds.split):
        name = ds.class_names[label]
        k = counters.get((split, label), 0)
        counters[(split, label)] = k + 1
        rel = Path(split) / name / f"img_{k:05d}.pgm"
        (root / rel.parent).mkdir(parents=True, exist_ok=True)
        write_pgm(root / rel, img)
        rows.append((rel.as_posix(), int(label), split))
    buf = io.StringIO()
    buf.write("# classes=" + ";".join(ds.class_names) + "\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["path", "label", "split"])
    writer.writerows(rows)
    (root / "manifest.csv").write_text(buf.getvalue())
    return root / "manifest.csv"


class DatasetFormatError(ValueError):
    pass


def load(root) -> Dataset:
    root = Path(root)
    manifest = root / "manifest.csv"
    if not manifest.exists():
        raise DatasetFormatError(f"missing manifest: {manifest}")
    lines = manifest.read_text().splitlines()
    class_names = None
    if lines and lines[0].startswith("#"):
        header = lines.pop(0)[1:].strip()
        if not header.startswith("classes="):
            raise DatasetFormatError(f"{manifest}: malformed class header {header!r}")
        class_names = [n for n in header[len("classes="):].split(";") if n]
    reader = csv.reader(lines)
    columns = next(reader, None)
    if columns != ["path", "label", "split"]:
        raise DatasetFormatError(f"{manifest}: expected columns path,label,split, got {columns}")
    records = []
    for lineno, row in enumerate(reader, start=3 if class_names is not None else 2):
        if len(row) != 3:
            raise DatasetFormatError(f"{manifest}:{lineno}: expected 3 fields, got {len(row)}")
        path, label, split = row
        try:
            label = int(label)
        except ValueError:
            raise DatasetFormatError(f"{manifest}:{lineno}: label {label!r} is not an integer") from None
        if split not in SPLITS:
            raise DatasetFormatError(f"{manifest}:{lineno}: unknown split {split!r}")
        records.append((path, label, split, lineno))
    if class_names is None:
        # derive names from the folder of each label
        by_label = {}
        for path, label, _, _ in records:
            by_label.setdefault(label, Path(path).parent.name)
        class_names = [by_label[i] for i in range(len(by_label))]
    images, labels, splits = [], [], []
    for path, label, split, lineno in records:
        if not 0 <= label < len(class_names):
            raise DatasetFormatError(f"{manifest}:{lineno}: label {label} outside the {len(class_names)} classes")
        folder = Path(path).parent.name
        if folder != class_names[label]:
            raise DatasetFormatError(
                f"{manifest}:{lineno}: {path} sits in folder {folder!r} but label {label} is {class_names[label]!r}"
            )
        full = root / path
        if not full.exists():
            raise DatasetFormatError(f"missing image file: {full}")
        images.append(read_pgm(full))
        labels.append(label)
        splits.append(split)
    if images and len({im.shape for im in images}) > 1:
        raise DatasetFormatError(f"{root}: images have differing sizes")
    stack = np.asarray(images, dtype=np.float32) if images else np.zeros((0, 1, 1), np.float32)
    return Dataset(stack, np.asarray(labels, dtype=np.int64), np.asarray(splits), class_names)
