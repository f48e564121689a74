"""Toy datasets, environment splits, and shared anchor sets."""

from __future__ import annotations

import csv
import hashlib
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

__all__ = [
    "Example",
    "Dataset",
    "AnchorSet",
    "FormatError",
    "make_colored_mnist",
    "make_synthetic_gaussian",
    "select_anchors",
    "load_idx",
    "load_csv",
    "save_csv",
    "load_digits_toy",
    "make_gaussian_blobs",
    "split_dataset",
    "shift_augment",
    "subset",
]


class FormatError(ValueError):
    """Raised when an input file does not match its declared format."""


@dataclass(frozen=True)
class Example:
    """One sample: input tensor x in [0,1], class label y, environment id d."""

    x: np.ndarray
    y: int
    d: int = 0

    def __post_init__(self):
        if not np.all(np.isfinite(self.x)):
            raise ValueError("example input contains non-finite values")


@dataclass
class Dataset:
    """Ordered collection of examples with a fixed class and environment count."""

    examples: list[Example]
    class_count: int
    env_count: int = 1
    _x_cache: np.ndarray | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        if not self.examples:
            raise ValueError("dataset must be non-empty")
        shape = self.examples[0].x.shape
        for ex in self.examples:
            if ex.x.shape != shape:
                raise ValueError(f"inconsistent example shapes: {ex.x.shape} vs {shape}")
            if not 0 <= ex.y < self.class_count:
                raise ValueError(f"label {ex.y} outside [0, {self.class_count})")
            if not 0 <= ex.d < self.env_count:
                raise ValueError(f"environment id {ex.d} outside [0, {self.env_count})")

    def __len__(self) -> int:
        return len(self.examples)

    def __getitem__(self, i: int) -> Example:
        return self.examples[i]

    @property
    def input_shape(self) -> tuple[int, ...]:
        return self.examples[0].x.shape

    def x_array(self) -> np.ndarray:
        """All inputs stacked as float32, shape (n, *input_shape)."""
        if self._x_cache is None:
            self._x_cache = np.stack([ex.x for ex in self.examples]).astype(np.float32)
        return self._x_cache

    def y_array(self) -> np.ndarray:
        return np.array([ex.y for ex in self.examples], dtype=np.int64)

    def d_array(self) -> np.ndarray:
        return np.array([ex.d for ex in self.examples], dtype=np.int64)


@dataclass(frozen=True)
class AnchorSet:
    """Shared reference samples; identical (by content hash) across transceiver pairs."""

    indices: tuple[int, ...]
    examples: tuple[Example, ...]
    k: int
    content_hash: str

    def x_array(self) -> np.ndarray:
        return np.stack([ex.x for ex in self.examples]).astype(np.float32)


def _hash_examples(indices, examples) -> str:
    h = hashlib.sha256()
    for i, ex in zip(indices, examples):
        h.update(struct.pack(">q", int(i)))
        h.update(np.ascontiguousarray(ex.x, dtype=np.float32).tobytes())
        h.update(struct.pack(">qq", int(ex.y), int(ex.d)))
    return h.hexdigest()


def make_colored_mnist(
    base_digits: Dataset,
    env_correlations: list[float],
    label_flip: float = 0.25,
    seed: int = 0,
) -> Dataset:
    """Two-channel colored variant of a grayscale digit dataset.

    The binary label is 1 for digits below 5, flipped with probability
    ``label_flip``.  A color channel (0 or 1) is chosen to agree with the
    final label with probability ``env_correlations[d]``, where environments
    partition the examples round-robin.  Deterministic given ``seed``.
    """
    if len(base_digits) == 0:
        raise ValueError("base dataset is empty")
    for c in env_correlations:
        if not 0.0 <= c <= 1.0:
            raise ValueError(f"correlation {c} outside [0, 1]")
    if not 0.0 <= label_flip <= 0.5:
        raise ValueError(f"label_flip {label_flip} outside [0, 0.5]")
    if not env_correlations:
        raise ValueError("need at least one environment correlation")

    rng = np.random.default_rng(seed)
    n = len(base_digits)
    n_env = len(env_correlations)
    envs = np.arange(n) % n_env
    corr = np.asarray(env_correlations, dtype=np.float64)[envs]

    digits = base_digits.y_array()
    y = (digits < 5).astype(np.int64)
    y = np.where(rng.random(n) < label_flip, 1 - y, y)
    color = np.where(rng.random(n) < corr, y, 1 - y)

    examples = []
    for i, ex in enumerate(base_digits.examples):
        img = np.asarray(ex.x, dtype=np.float32)
        img = img.reshape(img.shape[-2:]) if img.ndim == 3 else img
        x = np.zeros((2,) + img.shape, dtype=np.float32)
        x[color[i]] = img
        examples.append(Example(x=x, y=int(y[i]), d=int(envs[i])))
    return Dataset(examples=examples, class_count=2, env_count=n_env)


def make_synthetic_gaussian(
    dim: int, rho: float, n: int, seed: int = 0
) -> tuple[np.ndarray, np.ndarray]:
    """Paired samples (U, V) with per-coordinate correlation rho.

    Each of the ``dim`` coordinate pairs is jointly Gaussian with zero mean,
    unit variance, and correlation ``rho``; coordinates are independent of
    each other.
    """
    if abs(rho) >= 1.0:
        raise ValueError(f"|rho| must be < 1, got {rho}")
    if n < 2:
        raise ValueError("need at least 2 samples")
    rng = np.random.default_rng(seed)
    u = rng.standard_normal((n, dim))
    v = rho * u + np.sqrt(1.0 - rho * rho) * rng.standard_normal((n, dim))
    return u, v


def select_anchors(
    dataset: Dataset, k: int, strategy: str = "uniform", seed: int = 0
) -> AnchorSet:
    """Pick k anchor examples, deterministically given the seed.

    "uniform" samples without replacement; "per-class" balances anchors over
    classes (floor/ceil of k / class_count each).  Indices are sorted so the
    anchor order is canonical.
    """
    if k < 2:
        raise ValueError("need at least 2 anchors")
    if k > len(dataset):
        raise ValueError(f"k={k} exceeds dataset size {len(dataset)}")
    rng = np.random.default_rng(seed)
    if strategy == "uniform":
        idx = rng.choice(len(dataset), size=k, replace=False)
    elif strategy == "per-class":
        c = dataset.class_count
        if k < c:
            raise ValueError(f"per-class selection needs k >= class_count ({c})")
        labels = dataset.y_array()
        base, extra = divmod(k, c)
        # classes picked for the extra anchor are themselves seed-deterministic
        extra_classes = set(rng.choice(c, size=extra, replace=False).tolist())
        idx = []
        for cls in range(c):
            want = base + (1 if cls in extra_classes else 0)
            pool = np.where(labels == cls)[0]
            if len(pool) < want:
                raise ValueError(f"class {cls} has only {len(pool)} examples, need {want}")
            idx.extend(rng.choice(pool, size=want, replace=False).tolist())
        idx = np.array(idx)
    else:
        raise ValueError(f"unknown strategy {strategy!r}")
    idx = np.sort(idx)
    examples = tuple(dataset.examples[int(i)] for i in idx)
    indices = tuple(int(i) for i in idx)
    return AnchorSet(
        indices=indices,
        examples=examples,
        k=k,
        content_hash=_hash_examples(indices, examples),
    )


IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801


def _read_idx_images(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 16:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n, rows, cols = struct.unpack(">iiii", data[:16])
    if magic != IDX_IMAGE_MAGIC:
        raise FormatError(f"{path}: bad image magic 0x{magic:08x}")
    need = 16 + n * rows * cols
    if len(data) < need:
        raise FormatError(f"{path}: expected {need} bytes, got {len(data)}")
    arr = np.frombuffer(data, dtype=np.uint8, count=n * rows * cols, offset=16)
    return arr.reshape(n, rows, cols)


def _read_idx_labels(path) -> np.ndarray:
    data = Path(path).read_bytes()
    if len(data) < 8:
        raise FormatError(f"{path}: truncated IDX header")
    magic, n = struct.unpack(">ii", data[:8])
    if magic != IDX_LABEL_MAGIC:
        raise FormatError(f"{path}: bad label magic 0x{magic:08x}")
    if len(data) < 8 + n:
        raise FormatError(f"{path}: expected {8 + n} bytes, got {len(data)}")
    return np.frombuffer(data, dtype=np.uint8, count=n, offset=8)


def load_idx(images_path, labels_path) -> Dataset:
    """Load a big-endian IDX image/label pair; pixels rescaled to [0,1]."""
    images = _read_idx_images(images_path)
    labels = _read_idx_labels(labels_path)
    if len(images) != len(labels):
        raise FormatError(
            f"image count {len(images)} != label count {len(labels)}"
        )
    examples = [
        Example(x=(img[None].astype(np.float32) / 255.0), y=int(lab))
        for img, lab in zip(images, labels)
    ]
    return Dataset(examples=examples, class_count=int(labels.max()) + 1)


def load_csv(path, label_column: str) -> Dataset:
    """Load a header-row CSV; every non-label column is a flat input feature."""
    with open(path, newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if reader.fieldnames is None or label_column not in reader.fieldnames:
            raise FormatError(f"{path}: missing label column {label_column!r}")
        feat_cols = [c for c in reader.fieldnames if c not in (label_column, "d")]
        has_env = "d" in reader.fieldnames
        examples = []
        for row in reader:
            x = np.array([float(row[c]) for c in feat_cols], dtype=np.float32)
            d = int(row["d"]) if has_env else 0
            examples.append(Example(x=x, y=int(float(row[label_column])), d=d))
    if not examples:
        raise FormatError(f"{path}: no data rows")
    class_count = max(ex.y for ex in examples) + 1
    env_count = max(ex.d for ex in examples) + 1
    return Dataset(examples=examples, class_count=class_count, env_count=env_count)


def save_csv(dataset: Dataset, path) -> None:
    """Export a dataset to CSV (flattened features, label column "y", env "d")."""
    n_feat = int(np.prod(dataset.input_shape))
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow([f"x{i}" for i in range(n_feat)] + ["y", "d"])
        for ex in dataset.examples:
            writer.writerow(
                [repr(float(v)) for v in ex.x.reshape(-1)] + [ex.y, ex.d]
            )


def make_gaussian_blobs(n: int, dim: int, classes: int, spread: float = 1.0,
                        seed: int = 0) -> Dataset:
    """Sigmoid-squashed Gaussian class blobs (a label-bearing synthetic task)."""
    if n < classes:
        raise ValueError("need at least one sample per class")
    rng = np.random.default_rng(seed)
    means = rng.standard_normal((classes, dim)) * 2.0
    labels = np.arange(n) % classes
    raw = means[labels] + rng.standard_normal((n, dim)) * spread
    x = 1.0 / (1.0 + np.exp(-raw))
    order = rng.permutation(n)
    examples = [Example(x=x[i].astype(np.float32), y=int(labels[i])) for i in order]
    return Dataset(examples=examples, class_count=classes)


def load_digits_toy(seed: int = 0, shuffle: bool = True) -> Dataset:
    """The bundled 8x8 scikit-learn digits as a 10-class grayscale dataset."""
    from sklearn.datasets import load_digits

    raw = load_digits()
    imgs = (raw.images / 16.0).astype(np.float32)
    labels = raw.target.astype(np.int64)
    order = np.arange(len(imgs))
    if shuffle:
        order = np.random.default_rng(seed).permutation(len(imgs))
    examples = [Example(x=imgs[i][None], y=int(labels[i])) for i in order]
    return Dataset(examples=examples, class_count=10)


def subset(dataset: Dataset, indices) -> Dataset:
    """New dataset referencing the selected examples (order as given)."""
    examples = [dataset.examples[int(i)] for i in indices]
    return Dataset(
        examples=examples,
        class_count=dataset.class_count,
        env_count=dataset.env_count,
    )


def split_dataset(dataset: Dataset, sizes: list[int]) -> list[Dataset]:
    """Split into consecutive chunks of the given sizes (must fit)."""
    if sum(sizes) > len(dataset):
        raise ValueError(f"split sizes {sizes} exceed dataset size {len(dataset)}")
    out, start = [], 0
    for s in sizes:
        out.append(subset(dataset, range(start, start + s)))
        start += s
    return out


def shift_augment(dataset: Dataset, shifts: list[tuple[int, int]]) -> Dataset:
    """Append integer-pixel translated copies of every 2-d image example."""
    examples = list(dataset.examples)
    for dx, dy in shifts:
        for ex in dataset.examples:
            img = ex.x
            out = np.zeros_like(img)
            h, w = img.shape[-2], img.shape[-1]
            ty = slice(max(0, dy), h + min(0, dy))
            sy = slice(max(0, -dy), h + min(0, -dy))
            tx = slice(max(0, dx), w + min(0, dx))
            sx = slice(max(0, -dx), w + min(0, -dx))
            out[..., ty, tx] = img[..., sy, sx]
            examples.append(Example(x=out, y=ex.y, d=ex.d))
    return Dataset(
        examples=examples,
        class_count=dataset.class_count,
        env_count=dataset.env_count,
    )
