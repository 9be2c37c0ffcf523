"""Datasets, task splits and imbalance transforms."""

from __future__ import annotations

import gzip
import os
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801
CIFAR_RECORD = 3073
DATA_DIR_ENV = "PEC_DATA_DIR"


class DataFormatError(ValueError):
    pass


@dataclass
class Dataset:
    x: np.ndarray  # (N, ...) float32 in [0, 1]
    y: np.ndarray  # (N,) int64
    num_classes: int
    split: str = "train"
    name: str = ""

    def __post_init__(self):
        if len(self.x) != len(self.y):
            raise ValueError("x and y lengths differ")
        if len(self.y) and (self.y.min() < 0 or self.y.max() >= self.num_classes):
            raise ValueError("labels outside [0, num_classes)")

    def __len__(self):
        return len(self.y)

    @property
    def sample_shape(self) -> tuple[int, ...]:
        return tuple(self.x.shape[1:])

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.y, minlength=self.num_classes)

    def subset(self, idx) -> Dataset:
        return Dataset(self.x[idx], self.y[idx], self.num_classes, self.split, self.name)

    def flattened(self) -> Dataset:
        return Dataset(self.x.reshape(len(self.x), -1), self.y, self.num_classes, self.split, self.name)


def default_data_dir(dataset: str) -> Path:
    root = os.environ.get(DATA_DIR_ENV)
    if root:
        return Path(root) / dataset
    return Path.home() / "data" / dataset


# --------------------------------------------------------------------------
# MNIST (IDX)


def _read_bytes(path: Path) -> bytes:
    if not path.exists() and path.with_suffix(path.suffix + ".gz").exists():
        path = path.with_suffix(path.suffix + ".gz")
    if path.suffix == ".gz":
        with gzip.open(path, "rb") as f:
            return f.read()
    return path.read_bytes()


def read_idx(path, expected_magic: int) -> np.ndarray:
    """Parse a big-endian IDX file of unsigned bytes."""
    raw = _read_bytes(Path(path))
    if len(raw) < 8:
        raise DataFormatError(f"{path}: truncated header")
    magic = int.from_bytes(raw[:4], "big")
    if magic != expected_magic:
        raise DataFormatError(f"{path}: magic {magic:#010x}, expected {expected_magic:#010x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    dims = [int.from_bytes(raw[4 + 4 * i : 8 + 4 * i], "big") for i in range(ndim)]
    n = int(np.prod(dims))
    if len(raw) - header != n:
        raise DataFormatError(f"{path}: expected {n} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _load_idx_pair(directory: Path, prefix: str, expected: int | None):
    images = read_idx(directory / f"{prefix}-images-idx3-ubyte", IDX_IMAGES_MAGIC)
    labels = read_idx(directory / f"{prefix}-labels-idx1-ubyte", IDX_LABELS_MAGIC)
    if len(images) != len(labels):
        raise DataFormatError(f"{prefix}: {len(images)} images but {len(labels)} labels")
    if expected is not None and len(labels) != expected:
        raise DataFormatError(f"{prefix}: expected {expected} samples, found {len(labels)}")
    x = images.reshape(len(images), -1).astype(np.float32) / 255.0
    return x, labels.astype(np.int64)


def load_mnist(directory=None, strict_counts: bool = True) -> tuple[Dataset, Dataset]:
    """Load MNIST from the four IDX files (optionally gzipped), pixels in [0, 1]."""
    directory = Path(directory) if directory is not None else default_data_dir("mnist")
    xtr, ytr = _load_idx_pair(directory, "train", 60000 if strict_counts else None)
    xte, yte = _load_idx_pair(directory, "t10k", 10000 if strict_counts else None)
    return (Dataset(xtr, ytr, 10, "train", "mnist"), Dataset(xte, yte, 10, "test", "mnist"))


# --------------------------------------------------------------------------
# CIFAR-10 (binary batches)


def read_cifar_batch(path) -> tuple[np.ndarray, np.ndarray]:
    raw = Path(path).read_bytes()
    if len(raw) % CIFAR_RECORD:
        raise DataFormatError(f"{path}: size {len(raw)} is not a multiple of {CIFAR_RECORD}")
    rec = np.frombuffer(raw, dtype=np.uint8).reshape(-1, CIFAR_RECORD)
    labels = rec[:, 0].astype(np.int64)
    x = rec[:, 1:].reshape(-1, 3, 32, 32).astype(np.float32) / 255.0
    return x, labels


def load_cifar10(directory=None) -> tuple[Dataset, Dataset]:
    """Load the CIFAR-10 binary version as CHW float32 in [0, 1]."""
    directory = Path(directory) if directory is not None else default_data_dir("cifar10")
    if (directory / "cifar-10-batches-bin").is_dir():
        directory = directory / "cifar-10-batches-bin"
    parts = [read_cifar_batch(directory / f"data_batch_{i}.bin") for i in range(1, 6)]
    xtr = np.concatenate([p[0] for p in parts])
    ytr = np.concatenate([p[1] for p in parts])
    xte, yte = read_cifar_batch(directory / "test_batch.bin")
    for name, y in (("train", ytr), ("test", yte)):
        if len(y) and y.max() > 9:
            raise DataFormatError(f"CIFAR-10 {name} labels outside 0..9")
    return (Dataset(xtr, ytr, 10, "train", "cifar10"), Dataset(xte, yte, 10, "test", "cifar10"))


# --------------------------------------------------------------------------
# synthetic data


def gaussian_means(num_classes: int, dim: int, mean_scale: float, rng) -> np.ndarray:
    """Class means with pairwise distance >= mean_scale."""
    if num_classes <= dim:
        # random orthonormal directions, all pairwise distances exactly mean_scale
        q, _ = np.linalg.qr(rng.standard_normal((dim, dim)))
        return q[:, :num_classes].T * (mean_scale / np.sqrt(2.0))
    radius = mean_scale
    while True:
        for _ in range(200):
            m = rng.standard_normal((num_classes, dim))
            m *= radius / np.linalg.norm(m, axis=1, keepdims=True)
            d = np.linalg.norm(m[:, None] - m[None], axis=-1)
            np.fill_diagonal(d, np.inf)
            if d.min() >= mean_scale:
                return m
        radius *= 1.5


def synthetic_gaussians(num_classes: int, dim: int, mean_scale: float, n_per_class: int,
                        seed: int = 0, n_test_per_class: int | None = None) -> tuple[Dataset, Dataset]:
    """Isotropic unit-variance Gaussian classes."""
    if num_classes < 2:
        raise ValueError("need at least two classes")
    n_test_per_class = n_per_class if n_test_per_class is None else n_test_per_class
    rng = np.random.default_rng(seed)
    means = gaussian_means(num_classes, dim, mean_scale, rng)

    def draw(n, split):
        y = np.repeat(np.arange(num_classes), n)
        x = (means[y] + rng.standard_normal((len(y), dim))).astype(np.float32)
        ds = Dataset(x, y, num_classes, split, "synthetic")
        ds.means = means
        return ds

    return draw(n_per_class, "train"), draw(n_test_per_class, "test")


# --------------------------------------------------------------------------
# task streams


@dataclass
class Task:
    classes: tuple[int, ...]
    x: np.ndarray
    y: np.ndarray

    def __len__(self):
        return len(self.y)

    def class_data(self, c: int) -> np.ndarray:
        """Samples of class ``c`` in stream order."""
        return self.x[self.y == c]


@dataclass
class TaskStream:
    tasks: list[Task] = field(default_factory=list)

    def __iter__(self):
        return iter(self.tasks)

    def __len__(self):
        return len(self.tasks)

    @property
    def classes(self) -> list[int]:
        return [c for t in self.tasks for c in t.classes]


def parse_split(split: str) -> tuple[int, int]:
    t, c = split.split("/")
    return int(t), int(c)


def class_order(ds: Dataset, c: int, seed: int) -> np.ndarray:
    """Shuffled indices of class ``c``; depends only on (seed, c)."""
    idx = np.flatnonzero(ds.y == c)
    return idx[np.random.default_rng([seed, c]).permutation(len(idx))]


def split_tasks(ds: Dataset, num_tasks: int, classes_per_task: int, order=None, seed: int = 0) -> TaskStream:
    """Split ``ds`` into tasks of disjoint class subsets.

    Each class's samples are shuffled with a generator keyed on (seed, class),
    and classes of one task are interleaved by a random merge that keeps each
    class's own order. A class therefore sees the same sample sequence under
    every split.
    """
    if num_tasks * classes_per_task != ds.num_classes:
        raise ValueError(f"{num_tasks}x{classes_per_task} does not cover {ds.num_classes} classes")
    order = list(range(ds.num_classes)) if order is None else [int(c) for c in order]
    if sorted(order) != list(range(ds.num_classes)):
        raise ValueError("order must be a permutation of the classes")
    stream = TaskStream()
    for t in range(num_tasks):
        classes = tuple(order[t * classes_per_task : (t + 1) * classes_per_task])
        per_class = {c: class_order(ds, c, seed) for c in classes}
        slots = np.concatenate([np.full(len(per_class[c]), c) for c in classes])
        slots = slots[np.random.default_rng([seed, 1_000_003, t]).permutation(len(slots))]
        idx = np.empty(len(slots), dtype=np.int64)
        for c in classes:
            idx[slots == c] = per_class[c]
        stream.tasks.append(Task(classes, ds.x[idx], ds.y[idx]))
    return stream


def make_imbalanced(ds: Dataset, doubled: int = 0, halved: int = 1, seed: int = 0) -> Dataset:
    """Duplicate every sample of ``doubled`` and keep a random half of ``halved``."""
    rng = np.random.default_rng(seed)
    keep = []
    for c in range(ds.num_classes):
        idx = np.flatnonzero(ds.y == c)
        if c == halved:
            idx = np.sort(rng.choice(idx, size=len(idx) // 2, replace=False))
        elif c == doubled:
            idx = np.concatenate([idx, idx])
        keep.append(idx)
    return ds.subset(np.concatenate(keep))
