"""Moon generation, MNIST IDX ingestion, and minibatching."""

from __future__ import annotations

import gzip
import os
import struct
import urllib.request
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from sklearn.datasets import make_moons as _sk_make_moons

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801
MNIST_FILES = {
    "train": ("train-images-idx3-ubyte", "train-labels-idx1-ubyte"),
    "test": ("t10k-images-idx3-ubyte", "t10k-labels-idx1-ubyte"),
}
MIRROR_ENV = "LSAKIT_MNIST_MIRROR"
MNIST_DIR_ENV = "LSAKIT_MNIST_DIR"


class DataError(ValueError):
    pass


class IdxMagicError(DataError):
    pass


class IdxTruncatedError(DataError):
    pass


class IdxCountMismatchError(DataError):
    pass


@dataclass
class Dataset:
    inputs: np.ndarray
    targets: np.ndarray
    split: str = "train"
    num_classes: int = 2
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        if len(self.inputs) != len(self.targets):
            raise DataError(f"{len(self.inputs)} inputs but {len(self.targets)} targets")
        if len(self.targets) and (self.targets.min() < 0 or self.targets.max() >= self.num_classes):
            raise DataError(f"targets outside [0, {self.num_classes})")

    def __len__(self) -> int:
        return len(self.targets)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.inputs[idx], self.targets[idx], self.split, self.num_classes, dict(self.meta))

    def to_csv(self, path) -> None:
        """Write a 2-feature dataset as ``x1,x2,label`` rows."""
        if self.inputs.ndim != 2 or self.inputs.shape[1] != 2:
            raise DataError("CSV export is only defined for 2-D feature datasets")
        with open(path, "w", newline="\n") as fh:
            fh.write("x1,x2,label\n")
            for (a, b), t in zip(self.inputs, self.targets):
                fh.write(f"{float(a)!r},{float(b)!r},{int(t)}\n")


def make_moons(n: int, noise: float = 0.2, seed: int = 0, split: str = "train") -> Dataset:
    """Two interleaving half circles with Gaussian jitter (scikit-learn's recipe)."""
    if n < 2:
        raise DataError("make_moons needs n >= 2")
    x, y = _sk_make_moons(n_samples=n, noise=noise if noise > 0 else None, shuffle=True, random_state=seed)
    return Dataset(x.astype(np.float64), y.astype(np.int64), split, 2,
                   {"source": "moons", "noise": noise, "seed": seed})


def moon_splits(n_train: int = 1000, n_test: int = 1000, noise: float = 0.2, seed: int = 0):
    full = make_moons(n_train + n_test, noise, seed)
    train = full.subset(np.arange(n_train))
    test = full.subset(np.arange(n_train, n_train + n_test))
    train.split, test.split = "train", "test"
    return train, test


def _read(path) -> bytes:
    path = str(path)
    opener = gzip.open if path.endswith(".gz") else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 8:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise IdxMagicError(f"{path}: magic {got:#010x}, expected {magic:#010x}")
    ndim = raw[3]
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise IdxTruncatedError(f"{path}: header truncated ({len(raw)} bytes)")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    need = int(np.prod(dims))
    if len(raw) - header < need:
        raise IdxTruncatedError(f"{path}: expected {need} data bytes, found {len(raw) - header}")
    return np.frombuffer(raw, dtype=np.uint8, count=need, offset=header).reshape(dims)


def load_mnist_idx(image_path, label_path, split: str = "train") -> Dataset:
    """Parse a pair of (optionally gzipped) IDX files into a [0, 1] image dataset."""
    images = _parse_idx(_read(image_path), IMAGE_MAGIC, image_path)
    labels = _parse_idx(_read(label_path), LABEL_MAGIC, label_path)
    if images.shape[0] != labels.shape[0]:
        raise IdxCountMismatchError(
            f"count mismatch: {images.shape[0]} images in {image_path} vs {labels.shape[0]} labels in {label_path}")
    if labels.size and labels.max() > 9:
        raise DataError(f"{label_path}: label {labels.max()} outside [0, 9]")
    x = images.astype(np.float64)[:, None, :, :] / 255.0
    return Dataset(x, labels.astype(np.int64), split, 10, {"source": "mnist", "images": str(image_path)})


def _locate(directory: Path, name: str) -> Path:
    for candidate in (directory / name, directory / f"{name}.gz"):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(f"{name}[.gz] not found in {directory}")


def mnist_dir(path=None) -> Path:
    return Path(path or os.environ.get(MNIST_DIR_ENV) or "data/mnist")


def load_mnist(directory=None, split: str = "train") -> Dataset:
    d = mnist_dir(directory)
    img, lab = MNIST_FILES[split]
    return load_mnist_idx(_locate(d, img), _locate(d, lab), split)


def fetch_mnist(directory, mirror: str | None = None) -> Path:
    """Download the four gzipped IDX files from ``mirror`` (or $LSAKIT_MNIST_MIRROR)."""
    mirror = mirror or os.environ.get(MIRROR_ENV)
    if not mirror:
        raise DataError(f"no MNIST mirror configured; set {MIRROR_ENV} or pass mirror=")
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for pair in MNIST_FILES.values():
        for name in pair:
            target = d / f"{name}.gz"
            if not target.exists():
                urllib.request.urlretrieve(f"{mirror.rstrip('/')}/{name}.gz", target)
    return d


def batches(dataset: Dataset, batch_size: int, shuffle: bool = False, seed: int = 0, epoch: int = 0):
    """Yield ``(inputs, targets)`` covering every sample once.

    With ``shuffle`` the permutation depends only on ``(seed, epoch)``.
    """
    if batch_size < 1:
        raise ValueError("batch_size must be >= 1")
    n = len(dataset)
    order = np.random.default_rng([seed, epoch]).permutation(n) if shuffle else np.arange(n)
    for start in range(0, n, batch_size):
        idx = order[start:start + batch_size]
        yield dataset.inputs[idx], dataset.targets[idx]
