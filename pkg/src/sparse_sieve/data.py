"""MNIST-style IDX ingestion, synthetic blob datasets, and minibatching."""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator

import numpy as np

IMAGES_MAGIC = 0x00000803
LABELS_MAGIC = 0x00000801
DATA_ENV = "SPARSE_SIEVE_DATA"

MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}


class IDXFormatError(ValueError):
    pass


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray  # (n, C, H, W) float64 in [0, 1]
    labels: np.ndarray  # (n,) int64
    num_classes: int
    provenance: str = "synthetic"

    def __post_init__(self) -> None:
        if self.images.ndim != 4:
            raise ValueError(f"images must be (n, C, H, W), got {self.images.shape}")
        if len(self.images) != len(self.labels):
            raise ValueError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("labels must lie in [0, num_classes)")
        if self.images.size and (self.images.min() < 0 or self.images.max() > 1):
            raise ValueError("pixels must lie in [0, 1]")

    def __len__(self) -> int:
        return len(self.labels)

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def subset(self, index) -> "Dataset":
        index = np.asarray(index)
        return Dataset(self.images[index], self.labels[index], self.num_classes, self.provenance)

    def head(self, n: int) -> "Dataset":
        return self.subset(np.arange(min(n, len(self))))


def _open(path: Path):
    return gzip.open(path, "rb") if path.suffix == ".gz" else open(path, "rb")


def _read_idx(path, magic: int, ndim: int) -> np.ndarray:
    path = Path(path)
    with _open(path) as fh:
        raw = fh.read()
    if len(raw) < 4 + 4 * ndim:
        raise IDXFormatError(f"{path}: truncated header")
    (got,) = struct.unpack(">I", raw[:4])
    if got != magic:
        raise IDXFormatError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    dims = struct.unpack(f">{ndim}I", raw[4 : 4 + 4 * ndim])
    expected = int(np.prod(dims))
    body = raw[4 + 4 * ndim :]
    if len(body) != expected:
        raise IDXFormatError(f"{path}: payload has {len(body)} bytes, header promises {expected}")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int = 10, provenance: str = "mnist") -> Dataset:
    """Read an IDX image/label pair; gzip is detected by a ``.gz`` suffix."""
    imgs = _read_idx(images_path, IMAGES_MAGIC, 3)
    labels = _read_idx(labels_path, LABELS_MAGIC, 1)
    if len(imgs) != len(labels):
        raise IDXFormatError(f"count mismatch: {len(imgs)} images, {len(labels)} labels")
    if len(labels) and labels.max() >= num_classes:
        raise IDXFormatError(f"label {labels.max()} exceeds {num_classes} classes")
    images = imgs.astype(np.float64)[:, None] / 255.0
    return Dataset(images, labels.astype(np.int64), num_classes, provenance)


def write_idx(images_path, labels_path, images: np.ndarray, labels: np.ndarray) -> None:
    """Write uint8 images (n, H, W) and labels (n,) as IDX, gzipped if suffixed ``.gz``."""
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    n, h, w = images.shape
    blobs = {
        Path(images_path): struct.pack(">IIII", IMAGES_MAGIC, n, h, w) + images.tobytes(),
        Path(labels_path): struct.pack(">II", LABELS_MAGIC, len(labels)) + labels.tobytes(),
    }
    for path, blob in blobs.items():
        if path.suffix == ".gz":
            # mtime=0 keeps the output byte-stable
            with gzip.GzipFile(path, "wb", mtime=0) as fh:
                fh.write(blob)
        else:
            path.write_bytes(blob)


def resolve_data_root(root=None) -> Path:
    root = root or os.environ.get(DATA_ENV)
    if not root:
        raise FileNotFoundError(f"no dataset directory given and ${DATA_ENV} is unset")
    return Path(root)


def find_split(root, split: str) -> tuple[Path, Path]:
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    found = []
    for stem in MNIST_FILES[split]:
        for candidate in (root / stem, root / f"{stem}.gz"):
            if candidate.exists():
                found.append(candidate)
                break
        else:
            raise FileNotFoundError(f"{root}: missing {stem}[.gz]")
    return found[0], found[1]


def load_mnist(root=None, split: str = "test") -> Dataset:
    return load_idx(*find_split(resolve_data_root(root), split))


def synthetic_blobs(
    classes: int = 2,
    per_class: int = 200,
    shape: tuple[int, int, int] = (1, 28, 28),
    seed: int = 0,
    noise: float = 0.15,
) -> Dataset:
    """Classes built from Gaussian blob prototypes plus clipped pixel noise.

    Each class gets two bright blobs at random centers; samples add iid
    Gaussian noise and are clipped to [0, 1]. Order is class-major.
    """
    if classes < 2:
        raise ValueError("need at least two classes")
    rng = np.random.default_rng(seed)
    c, h, w = shape
    yy, xx = np.mgrid[0:h, 0:w]
    prototypes = np.zeros((classes, c, h, w))
    for k in range(classes):
        for _ in range(2):
            cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
            radius = rng.uniform(0.08, 0.16) * min(h, w)
            blob = np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * radius**2))
            prototypes[k] += blob[None] * rng.uniform(0.6, 1.0, size=(c, 1, 1))
    prototypes = np.clip(prototypes, 0.0, 1.0)
    images = prototypes[np.repeat(np.arange(classes), per_class)]
    images = np.clip(images + rng.normal(0.0, noise, size=images.shape), 0.0, 1.0)
    labels = np.repeat(np.arange(classes), per_class).astype(np.int64)
    return Dataset(images, labels, classes, "synthetic")


def split(dataset: Dataset, test_fraction: float = 0.25, seed: int = 0) -> tuple[Dataset, Dataset]:
    order = np.random.default_rng(seed).permutation(len(dataset))
    n_test = int(round(len(dataset) * test_fraction))
    return dataset.subset(np.sort(order[n_test:])), dataset.subset(np.sort(order[:n_test]))


def batch_iter(dataset: Dataset, batch_size: int, shuffle_seed: int | None = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    """Yield (images, labels) batches; the final short batch is included."""
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.arange(n) if shuffle_seed is None else np.random.default_rng(shuffle_seed).permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        yield dataset.images[idx], dataset.labels[idx]
