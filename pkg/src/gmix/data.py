"""Datasets, file loaders, one-hot labels and seeded minibatch iteration."""
from __future__ import annotations

import csv
import gzip
import struct
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np

from .errors import (
    BadMagicError,
    CountMismatchError,
    IdxFormatError,
    TruncatedFileError,
    ValidationError,
)

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class Dataset:
    features: np.ndarray  # (n, p)
    labels: np.ndarray    # (n,) int class indices
    num_classes: int
    split: str = "train"

    def __post_init__(self):
        x = np.asarray(self.features, dtype=np.float64)
        y = np.asarray(self.labels)
        if x.ndim != 2 or x.shape[0] < 1:
            raise ValidationError(f"features must be a non-empty 2-d array, got {x.shape}")
        if y.shape != (x.shape[0],):
            raise ValidationError(f"{y.shape[0] if y.ndim else 0} labels for {x.shape[0]} rows")
        if not np.all(np.isfinite(x)):
            raise ValidationError("features contain NaN or Inf")
        if y.size and (y.min() < 0 or y.max() >= self.num_classes):
            raise ValidationError(f"labels must lie in [0, {self.num_classes})")
        if self.split not in ("train", "test"):
            raise ValidationError(f"split must be 'train' or 'test', got {self.split!r}")
        object.__setattr__(self, "features", x)
        object.__setattr__(self, "labels", y.astype(np.int64))

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def p(self) -> int:
        return self.features.shape[1]


@dataclass(frozen=True)
class LabeledBatch:
    x: np.ndarray               # (b, p)
    y: np.ndarray               # (b, m) soft-label rows
    source_indices: np.ndarray  # (b,) rows of the originating dataset

    def __post_init__(self):
        if self.x.shape[0] != self.y.shape[0] or self.x.shape[0] != len(self.source_indices):
            raise ValidationError("batch features, labels and indices disagree in length")
        sums = self.y.sum(axis=1)
        if np.any(np.abs(sums - 1.0) > 1e-9):
            raise ValidationError("every label row must sum to 1")

    @property
    def size(self) -> int:
        return self.x.shape[0]


def one_hot(label: int, m: int) -> np.ndarray:
    if not 0 <= label < m:
        raise ValidationError(f"label {label} outside [0, {m})")
    row = np.zeros(m)
    row[label] = 1.0
    return row


def one_hot_rows(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64)
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValidationError(f"labels outside [0, {m})")
    out = np.zeros((labels.size, m))
    out[np.arange(labels.size), labels] = 1.0
    return out


def full_batch(ds: Dataset) -> LabeledBatch:
    return LabeledBatch(ds.features, one_hot_rows(ds.labels, ds.num_classes), np.arange(ds.n))


def batches(ds: Dataset, batch_size: int, seed: int, epoch: int) -> list:
    """Shuffled minibatches for one epoch; the order depends only on ``(seed, epoch)``.

    The trailing short batch is kept, so every example appears exactly once.
    """
    if not 1 <= batch_size <= ds.n:
        raise ValidationError(f"batch size {batch_size} outside [1, {ds.n}]")
    rng = np.random.default_rng([int(seed), int(epoch)])
    order = rng.permutation(ds.n)
    y = one_hot_rows(ds.labels, ds.num_classes)
    return [
        LabeledBatch(ds.features[idx], y[idx], idx)
        for idx in (order[i:i + batch_size] for i in range(0, ds.n, batch_size))
    ]


# ---------------------------------------------------------------------------
# generators


def gen_two_moons(n: int, noise_std: float, seed, split: str = "train") -> Dataset:
    """Two interleaving unit half-circles with Gaussian noise.

    Class 0 lies on ``(cos t, sin t)`` and class 1 on
    ``(1 - cos t, 0.5 - sin t)`` for ``t`` in ``[0, pi]``, ``n / 2`` points each.
    """
    if n < 2 or n % 2:
        raise ValidationError(f"two-moons needs an even n >= 2, got {n}")
    if noise_std < 0:
        raise ValidationError("noise_std must be non-negative")
    from sklearn.datasets import make_moons

    x, y = make_moons(n_samples=n, noise=noise_std if noise_std > 0 else None,
                      random_state=int(seed) % 2**32)
    return Dataset(x, y, 2, split)


def standardize(train: Dataset, *others: Dataset):
    """Zero-mean unit-variance features using statistics of ``train``."""
    mu = train.features.mean(axis=0)
    sd = train.features.std(axis=0)
    sd = np.where(sd > 0, sd, 1.0)
    out = [replace(ds, features=(ds.features - mu) / sd) for ds in (train, *others)]
    return out if others else out[0]


def subset(ds: Dataset, n: int, seed) -> Dataset:
    if not 1 <= n <= ds.n:
        raise ValidationError(f"subset size {n} outside [1, {ds.n}]")
    idx = np.sort(np.random.default_rng(seed).choice(ds.n, size=n, replace=False))
    return replace(ds, features=ds.features[idx], labels=ds.labels[idx])


# ---------------------------------------------------------------------------
# IDX files
#
# Big-endian layout.  Images: u32 magic 0x00000803, u32 count, u32 rows,
# u32 cols, then count*rows*cols unsigned bytes, row-major per image.
# Labels: u32 magic 0x00000801, u32 count, then count unsigned bytes.


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as f:
        return f.read()


def _parse_idx(path, raw: bytes, magic: int, ndims: int) -> np.ndarray:
    header = 4 * (1 + ndims)
    if len(raw) < 4:
        raise TruncatedFileError(f"{path}: file too short for a magic number")
    found = struct.unpack(">I", raw[:4])[0]
    if found != magic:
        raise BadMagicError(path, found, magic)
    if len(raw) < header:
        raise TruncatedFileError(f"{path}: header needs {header} bytes, file has {len(raw)}")
    dims = struct.unpack(f">{ndims}I", raw[4:header])
    expected = int(np.prod(dims))
    body = raw[header:]
    if len(body) < expected:
        raise TruncatedFileError(f"{path}: expected {expected} data bytes, found {len(body)}")
    if len(body) > expected:
        raise IdxFormatError(f"{path}: {len(body) - expected} trailing bytes after data")
    return np.frombuffer(body, dtype=np.uint8).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """Load an IDX image/label pair; pixels are scaled to ``[0, 1]``."""
    images = _parse_idx(images_path, _read_bytes(images_path), IDX_IMAGES_MAGIC, 3)
    labels = _parse_idx(labels_path, _read_bytes(labels_path), IDX_LABELS_MAGIC, 1)
    if images.shape[0] != labels.shape[0]:
        raise CountMismatchError(
            f"{images_path} holds {images.shape[0]} images but "
            f"{labels_path} holds {labels.shape[0]} labels"
        )
    m = num_classes if num_classes is not None else max(2, int(labels.max()) + 1)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(x, labels.astype(np.int64), m, split)


def write_idx(images_path, labels_path, images, labels) -> None:
    images = np.asarray(images, dtype=np.uint8)
    labels = np.asarray(labels, dtype=np.uint8)
    if images.ndim != 3:
        raise ValidationError("images must have shape (count, rows, cols)")
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, *images.shape))
        f.write(images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, labels.size))
        f.write(labels.tobytes())


def make_digits_idx(out_dir, n_train: int = 2000, n_test: int = 1000, seed: int = 0,
                    held_out: int = 597) -> dict:
    """Write a jittered handwritten-digit image set (8x8 pixels, 10 classes) as IDX.

    Source images are scikit-learn's bundled digits.  The last ``held_out``
    of them only feed the test files, so no test digit shares a source image
    with a training digit.  Each output image is a source image under a small
    random rotation, scale and sub-pixel shift, plus pixel noise.
    """
    from scipy import ndimage
    from sklearn.datasets import load_digits

    digits = load_digits()
    src = digits.images / 16.0
    tgt = digits.target
    pools = {"train": np.arange(len(src) - held_out), "test": np.arange(len(src) - held_out, len(src))}
    rng = np.random.default_rng(seed)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    paths = {}
    for split, count in (("train", n_train), ("test", n_test)):
        pick = rng.choice(pools[split], size=count, replace=count > pools[split].size)
        imgs = np.empty((count, 8, 8))
        for k, i in enumerate(pick):
            angle = np.deg2rad(rng.uniform(-12, 12))
            scale = rng.uniform(0.9, 1.1)
            rot = np.array([[np.cos(angle), -np.sin(angle)], [np.sin(angle), np.cos(angle)]]) / scale
            centre = np.array([3.5, 3.5])
            offset = centre - rot @ centre + rng.uniform(-0.6, 0.6, size=2)
            img = ndimage.affine_transform(src[i], rot, offset=offset, order=1, mode="constant")
            imgs[k] = img + rng.normal(0.0, 0.05, size=(8, 8))
        pixels = np.clip(np.rint(imgs * 255.0), 0, 255).astype(np.uint8)
        ipath = out_dir / f"digits-{split}-images.idx3-ubyte"
        lpath = out_dir / f"digits-{split}-labels.idx1-ubyte"
        write_idx(ipath, lpath, pixels, tgt[pick])
        paths[split] = (ipath, lpath)
    return paths


def load_csv(path, label_column: str, num_classes: int | None = None,
             split: str = "train") -> Dataset:
    """CSV with one header row; ``label_column`` holds integer class indices."""
    with open(path, newline="") as f:
        reader = csv.reader(f)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError(f"{path}: empty CSV file") from None
        if label_column not in header:
            raise ValidationError(f"{path}: no column named {label_column!r}")
        li = header.index(label_column)
        feats, labels = [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ValidationError(f"{path}:{lineno}: expected {len(header)} fields")
            labels.append(int(row[li]))
            feats.append([float(v) for j, v in enumerate(row) if j != li])
    if not labels:
        raise ValidationError(f"{path}: no data rows")
    m = num_classes if num_classes is not None else max(2, max(labels) + 1)
    return Dataset(np.array(feats), np.array(labels), m, split)
