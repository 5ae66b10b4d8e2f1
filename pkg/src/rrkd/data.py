"""Datasets: the CIFAR-10 binary layout, synthetic grating images, subsetting.

Images are N x 3 x H x W float32 in [0, 1]. No standardization or
augmentation happens here.
"""

from __future__ import annotations

import os
from dataclasses import dataclass
from typing import Optional, Sequence, Tuple

import numpy as np

from .errors import DataError

CIFAR_RECORD = 1 + 3 * 32 * 32
CIFAR_RECORDS_PER_FILE = 10_000
CIFAR_TRAIN_FILES = [f"data_batch_{i}.bin" for i in range(1, 6)]
CIFAR_TEST_FILE = "test_batch.bin"


@dataclass(frozen=True)
class Dataset:
    images: np.ndarray
    labels: np.ndarray
    split: str = "train"
    num_classes: int = 10

    def __post_init__(self):
        if len(self.images) != len(self.labels):
            raise DataError(f"{len(self.images)} images but {len(self.labels)} labels")
        if len(self.labels) and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise DataError(f"labels outside [0, {self.num_classes})")

    def __len__(self):
        return len(self.labels)


def read_cifar10_batch(path, records: Optional[int] = CIFAR_RECORDS_PER_FILE):
    """Parse one CIFAR-10 binary file into (uint8 images N x 3 x 32 x 32, labels)."""
    try:
        raw = np.fromfile(path, dtype=np.uint8)
    except OSError as exc:
        raise DataError(f"{path}: cannot read ({exc})") from exc
    if records is not None:
        expected = records * CIFAR_RECORD
        if raw.size != expected:
            raise DataError(f"{path}: expected {expected} bytes ({records} records of {CIFAR_RECORD}), "
                            f"got {raw.size}")
    elif raw.size % CIFAR_RECORD:
        raise DataError(f"{path}: size {raw.size} is not a multiple of the {CIFAR_RECORD}-byte record")
    table = raw.reshape(-1, CIFAR_RECORD)
    labels = table[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        r = int(bad[0])
        raise DataError(f"{path}: label byte {labels[r]} > 9 in record {r} (byte offset {r * CIFAR_RECORD})")
    return table[:, 1:].reshape(-1, 3, 32, 32), labels


def load_cifar10(dir_path) -> Tuple[Dataset, Dataset]:
    if not os.path.isdir(dir_path):
        raise DataError(f"CIFAR-10 directory not found: {dir_path}")
    parts = [read_cifar10_batch(os.path.join(dir_path, f)) for f in CIFAR_TRAIN_FILES]
    train_px = np.concatenate([p[0] for p in parts])
    train_y = np.concatenate([p[1] for p in parts])
    test_px, test_y = read_cifar10_batch(os.path.join(dir_path, CIFAR_TEST_FILE))
    scale = np.float32(1 / 255)
    return (Dataset(train_px.astype(np.float32) * scale, train_y, "train"),
            Dataset(test_px.astype(np.float32) * scale, test_y, "test"))


def write_cifar10_batch(path, dataset: Dataset):
    """Inverse of :func:`read_cifar10_batch` for 3 x 32 x 32 images in [0, 1]."""
    if dataset.images.shape[1:] != (3, 32, 32):
        raise DataError(f"CIFAR-10 layout needs 3 x 32 x 32 images, got {dataset.images.shape[1:]}")
    px = np.clip(np.rint(dataset.images * 255), 0, 255).astype(np.uint8).reshape(len(dataset), -1)
    table = np.concatenate([dataset.labels.astype(np.uint8)[:, None], px], axis=1)
    table.tofile(path)


def class_templates(classes: int, image_size: int) -> np.ndarray:
    """One grating per class with distinct orientation and frequency, values in [0.15, 0.85]."""
    coords = np.arange(image_size) / image_size
    yy, xx = np.meshgrid(coords, coords, indexing="ij")
    out = np.empty((classes, 3, image_size, image_size), dtype=np.float64)
    for c in range(classes):
        theta = np.pi * c / classes
        freq = 1.5 + (c % 3)
        phase = 2 * np.pi * freq * (xx * np.cos(theta) + yy * np.sin(theta))
        for ch in range(3):
            out[c, ch] = 0.5 + 0.35 * np.sin(phase + ch * 2 * np.pi / 3)
    return out


def synthetic_dataset(seed: int, n_per_class: int, classes: int = 4, image_size: int = 32,
                      sigma: float = 0.1, split: str = "train") -> Dataset:
    """Gaussian noise around fixed per-class gratings, clipped to [0, 1]."""
    rng = np.random.default_rng(seed)
    templates = class_templates(classes, image_size)
    labels = np.repeat(np.arange(classes), n_per_class)
    noise = rng.standard_normal((len(labels), 3, image_size, image_size)) * sigma
    images = np.clip(templates[labels] + noise, 0.0, 1.0).astype(np.float32)
    order = rng.permutation(len(labels))
    return Dataset(images[order], labels[order], split, classes)


def subset_indices(dataset: Dataset, classes_keep: Sequence[int], n_per_class: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    picked = []
    for c in classes_keep:
        pool = np.flatnonzero(dataset.labels == c)
        if len(pool) < n_per_class:
            raise DataError(f"class {c} has {len(pool)} samples, {n_per_class} requested")
        picked.append(np.sort(rng.choice(pool, size=n_per_class, replace=False)))
    return np.concatenate(picked) if picked else np.zeros(0, dtype=np.int64)


def subset(dataset: Dataset, classes_keep: Sequence[int], n_per_class: int, seed: int) -> Dataset:
    """Class-balanced deterministic subsample; labels re-indexed to 0..len(classes_keep)-1."""
    idx = subset_indices(dataset, classes_keep, n_per_class, seed)
    remap = np.full(dataset.num_classes, -1, dtype=np.int64)
    remap[list(classes_keep)] = np.arange(len(classes_keep))
    return Dataset(dataset.images[idx], remap[dataset.labels[idx]], dataset.split, len(classes_keep))
