"""IDX-format ingestion for MNIST-style datasets.

Big-endian binary container: magic 2051 for image files (N x rows x cols
unsigned bytes) and 2049 for label files (N bytes, classes 0..9). Files
may be plain or gzip-compressed; compression is detected from the first
two bytes, not the filename.
"""

from __future__ import annotations

import gzip
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .linalg import Array

IMAGES_MAGIC = 2051
LABELS_MAGIC = 2049
NUM_CLASSES = 10

DATA_DIR_ENV = "STEPNETS_DATA_DIR"

_DATASET_DIRS = {
    "mnist": "mnist",
    "fashion": "fashion",
    "fashion-mnist": "fashion",
}

_FILE_STEMS = {
    "train_images": "train-images-idx3-ubyte",
    "train_labels": "train-labels-idx1-ubyte",
    "test_images": "t10k-images-idx3-ubyte",
    "test_labels": "t10k-labels-idx1-ubyte",
}


class IdxFormatError(ValueError):
    """The file is not a well-formed IDX payload."""


@dataclass
class Dataset:
    """Flattened features in [0, 1] with integer class labels."""

    features: Array
    labels: Array
    name: str = ""

    def __len__(self) -> int:
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]


def _read_all(path) -> bytes:
    with open(path, "rb") as fh:
        head = fh.read(2)
        fh.seek(0)
        if head == b"\x1f\x8b":
            with gzip.open(fh) as gz:
                return gz.read()
        return fh.read()


def load_idx_images(path) -> Array:
    """uint8 tensor of shape (N, rows, cols) from an IDX image file."""
    raw = _read_all(path)
    if len(raw) < 16:
        raise IdxFormatError(f"{path}: header truncated ({len(raw)} bytes, need 16)")
    magic, count, rows, cols = struct.unpack(">IIII", raw[:16])
    if magic != IMAGES_MAGIC:
        raise IdxFormatError(f"{path}: bad magic {magic:#010x}, expected {IMAGES_MAGIC:#010x}")
    expected = count * rows * cols
    payload = raw[16:]
    if len(payload) != expected:
        raise IdxFormatError(
            f"{path}: payload has {len(payload)} bytes, header declares {expected} "
            f"({count} images of {rows}x{cols})"
        )
    return np.frombuffer(payload, dtype=np.uint8).reshape(count, rows, cols)


def load_idx_labels(path) -> Array:
    """uint8 vector of N labels, each in 0..9, from an IDX label file."""
    raw = _read_all(path)
    if len(raw) < 8:
        raise IdxFormatError(f"{path}: header truncated ({len(raw)} bytes, need 8)")
    magic, count = struct.unpack(">II", raw[:8])
    if magic != LABELS_MAGIC:
        raise IdxFormatError(f"{path}: bad magic {magic:#010x}, expected {LABELS_MAGIC:#010x}")
    payload = raw[8:]
    if len(payload) != count:
        raise IdxFormatError(f"{path}: payload has {len(payload)} labels, header declares {count}")
    labels = np.frombuffer(payload, dtype=np.uint8)
    if labels.size and labels.max() >= NUM_CLASSES:
        bad = int(np.flatnonzero(labels >= NUM_CLASSES)[0])
        raise IdxFormatError(f"{path}: label {int(labels[bad])} at index {bad} exceeds class range 0..9")
    return labels


def preprocess(images: Array, labels: Array, name: str = "") -> Dataset:
    """Flatten row-major and scale pixel bytes by 1/255."""
    images = np.asarray(images)
    labels = np.asarray(labels)
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(
            f"image/label count mismatch: {images.shape[0]} images, {labels.shape[0]} labels"
        )
    features = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    return Dataset(features=features, labels=labels.astype(np.int64), name=name)


def default_data_dir() -> Path:
    return Path(os.environ.get(DATA_DIR_ENV, "data"))


def _resolve_file(directory: Path, stem: str) -> Path:
    for candidate in (directory / stem, directory / (stem + ".gz")):
        if candidate.exists():
            return candidate
    raise FileNotFoundError(
        f"missing dataset file {stem}[.gz] in {directory} "
        f"(set --data-dir or {DATA_DIR_ENV}, see README for fetching instructions)"
    )


def load_dataset(
    name: str,
    data_dir=None,
    subset: int | None = None,
    standardize: bool = False,
) -> tuple[Dataset, Dataset]:
    """Load (train, test) for 'mnist' or 'fashion'.

    subset truncates the training set to its first N samples; the test set
    is always full. standardize additionally centers/scales both splits by
    the training mean and standard deviation (off by default; plain 1/255
    scaling is the pinned convention).
    """
    if name not in _DATASET_DIRS:
        raise ValueError(f"unknown dataset {name!r}, expected one of {sorted(set(_DATASET_DIRS))}")
    directory = Path(data_dir) if data_dir is not None else default_data_dir()
    directory = directory / _DATASET_DIRS[name]
    train = preprocess(
        load_idx_images(_resolve_file(directory, _FILE_STEMS["train_images"])),
        load_idx_labels(_resolve_file(directory, _FILE_STEMS["train_labels"])),
        name=f"{name}-train",
    )
    test = preprocess(
        load_idx_images(_resolve_file(directory, _FILE_STEMS["test_images"])),
        load_idx_labels(_resolve_file(directory, _FILE_STEMS["test_labels"])),
        name=f"{name}-test",
    )
    if subset is not None:
        if subset < 1:
            raise ValueError(f"subset must be >= 1, got {subset}")
        train = Dataset(train.features[:subset], train.labels[:subset], name=train.name)
    if standardize:
        mean = train.features.mean()
        std = train.features.std()
        train = Dataset((train.features - mean) / std, train.labels, name=train.name)
        test = Dataset((test.features - mean) / std, test.labels, name=test.name)
    return train, test
