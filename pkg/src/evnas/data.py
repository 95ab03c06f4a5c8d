"""Image datasets: a synthetic sinusoid task and an IDX (MNIST-format) reader."""

from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterator, Optional

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


class DatasetError(ValueError):
    pass


class ImageDataset:
    """Images of shape (n, c, h, w) in [0, 1] with integer labels.

    Iterating yields ``(image, label)`` items.
    """

    def __init__(self, images: np.ndarray, labels: np.ndarray):
        images = np.asarray(images, dtype=np.float32)
        labels = np.asarray(labels, dtype=np.int64)
        if images.ndim != 4:
            raise DatasetError(f"images must be (n, c, h, w), got shape {images.shape}")
        if labels.shape != (images.shape[0],):
            raise DatasetError(f"{images.shape[0]} images but labels have shape {labels.shape}")
        self.images = images
        self.labels = labels

    def __len__(self) -> int:
        return len(self.labels)

    def __iter__(self) -> Iterator[tuple[np.ndarray, int]]:
        for x, y in zip(self.images, self.labels):
            yield x, int(y)

    @property
    def num_classes(self) -> int:
        return int(self.labels.max()) + 1 if len(self) else 0

    def batches(self, batch_size: int, limit: Optional[int] = None) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Sequential, unshuffled batches; the last one may be short."""
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        for i, start in enumerate(range(0, len(self), batch_size)):
            if limit is not None and i >= limit:
                return
            yield self.images[start : start + batch_size], self.labels[start : start + batch_size]

    def stream(self, batch_size: int, rng: np.random.Generator) -> Iterator[tuple[np.ndarray, np.ndarray]]:
        """Endless shuffled full batches, reshuffling after every pass."""
        if len(self) == 0:
            raise DatasetError("cannot stream an empty dataset")
        if batch_size < 1:
            raise ValueError("batch_size must be positive")
        while True:
            order = rng.permutation(len(self))
            if len(order) < batch_size:
                order = np.resize(order, batch_size)
            for start in range(0, len(order) - batch_size + 1, batch_size):
                idx = order[start : start + batch_size]
                yield self.images[idx], self.labels[idx]


@dataclass(frozen=True)
class SyntheticDatasetSpec:
    num_classes: int = 4
    train_per_class: int = 256
    val_per_class: int = 64
    image_size: int = 16
    # class c uses spatial frequencies (base + c*step) along rows and columns
    base_frequency: float = 1.0
    frequency_step: float = 0.5
    noise: float = 0.6
    seed: int = 0

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.train_per_class < 1 or self.val_per_class < 1:
            raise ValueError("need at least one image per class in each split")
        if self.image_size < 2:
            raise ValueError("image_size must be at least 2")
        if self.noise < 0:
            raise ValueError("noise must be non-negative")


def class_pattern(spec: SyntheticDatasetSpec, c: int) -> np.ndarray:
    """Noise-free image of class ``c`` with values in [0, 1]."""
    n = spec.image_size
    grid = np.arange(n) / n
    fy = spec.base_frequency + c * spec.frequency_step
    fx = spec.base_frequency + (spec.num_classes - 1 - c) * spec.frequency_step
    phase = math.pi * c / spec.num_classes
    img = np.sin(2 * math.pi * fy * grid[:, None] + phase) * np.cos(2 * math.pi * fx * grid[None, :])
    return (0.5 + 0.5 * img).astype(np.float32)


def _split(spec: SyntheticDatasetSpec, per_class: int, rng: np.random.Generator) -> ImageDataset:
    n = spec.image_size
    patterns = np.stack([class_pattern(spec, c) for c in range(spec.num_classes)])
    labels = np.repeat(np.arange(spec.num_classes), per_class)
    labels = labels[rng.permutation(len(labels))]
    images = patterns[labels] + spec.noise * rng.standard_normal((len(labels), n, n)).astype(np.float32)
    return ImageDataset(images[:, None], labels)


def generate_synthetic_dataset(spec: SyntheticDatasetSpec) -> tuple[ImageDataset, ImageDataset]:
    """Balanced train and validation splits; a pure function of ``spec``.

    The splits draw noise from independent child streams of the seed, so no
    validation image is a copy of a training image.
    """
    train_rng, val_rng = np.random.default_rng(spec.seed).spawn(2)
    return _split(spec, spec.train_per_class, train_rng), _split(spec, spec.val_per_class, val_rng)


def nearest_pattern_predict(spec: SyntheticDatasetSpec, images: np.ndarray) -> np.ndarray:
    """Label of the closest noise-free class pattern (squared distance)."""
    patterns = np.stack([class_pattern(spec, c) for c in range(spec.num_classes)]).reshape(spec.num_classes, -1)
    flat = np.asarray(images).reshape(len(images), -1)
    d = ((flat[:, None, :] - patterns[None]) ** 2).sum(-1)
    return d.argmin(1)


# ---------------------------------------------------------------------------
# IDX


def _read_idx(path, expected_magic: int, what: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 4:
        raise DatasetError(f"{path}: truncated, expected at least 4 bytes, got {len(raw)}")
    (magic,) = struct.unpack(">I", raw[:4])
    if magic != expected_magic:
        raise DatasetError(f"{path}: magic mismatch for {what} file: expected 0x{expected_magic:08x}, got 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DatasetError(f"{path}: truncated header, expected {header} bytes, got {len(raw)}")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    expected = header + math.prod(dims)
    if len(raw) != expected:
        raise DatasetError(f"{path}: expected {expected} bytes for dims {dims}, got {len(raw)}")
    return np.frombuffer(raw, dtype=np.uint8, offset=header).reshape(dims)


def _downsample(images: np.ndarray, size: int) -> np.ndarray:
    """Area-average (n, h, w) images to (n, size, size) by bin means."""
    n, h, w = images.shape
    if (h, w) == (size, size):
        return images
    rows = np.linspace(0, h, size + 1).astype(int)
    cols = np.linspace(0, w, size + 1).astype(int)
    out = np.empty((n, size, size), dtype=images.dtype)
    for i in range(size):
        for j in range(size):
            out[:, i, j] = images[:, rows[i] : max(rows[i + 1], rows[i] + 1), cols[j] : max(cols[j + 1], cols[j] + 1)].mean(axis=(1, 2))
    return out


def load_idx_dataset(images_path, labels_path, input_size: Optional[int] = None) -> ImageDataset:
    images = _read_idx(images_path, IDX_IMAGES_MAGIC, "images")
    labels = _read_idx(labels_path, IDX_LABELS_MAGIC, "labels")
    if images.ndim != 3:
        raise DatasetError(f"{images_path}: expected 3 dimensions (n, rows, cols), got {images.ndim}")
    if len(images) != len(labels):
        raise DatasetError(f"length mismatch: {len(images)} images but {len(labels)} labels")
    x = images.astype(np.float32) / 255.0
    if input_size is not None:
        x = _downsample(x, input_size)
    return ImageDataset(x[:, None], labels.astype(np.int64))


def write_idx(path, array: np.ndarray) -> None:
    """Write a uint8 array as an IDX file (images if 3-D, labels if 1-D)."""
    array = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | array.ndim
    Path(path).write_bytes(struct.pack(f">I{array.ndim}I", magic, *array.shape) + array.tobytes())


__all__ = [
    "DatasetError",
    "ImageDataset",
    "SyntheticDatasetSpec",
    "class_pattern",
    "generate_synthetic_dataset",
    "nearest_pattern_predict",
    "load_idx_dataset",
    "write_idx",
]
