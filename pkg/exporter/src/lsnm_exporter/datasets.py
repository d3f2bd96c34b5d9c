"""Synthetic pattern-digit datasets and IDX serialization.

Each class has a fixed smooth random pattern as its mean image; samples add
pixel noise and quantize to bytes. Training always runs on the quantized
pixels divided by 255 so the exporter and any IDX consumer see identical
values.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass(frozen=True)
class ImageDataset:
    images: np.ndarray  # uint8, (n, h, w)
    labels: np.ndarray  # int64, (n,)

    def __len__(self) -> int:
        return int(self.images.shape[0])

    @property
    def pixels(self) -> np.ndarray:
        return self.images.astype(np.float32) / np.float32(255.0)


def _smooth(field: np.ndarray, passes: int = 3) -> np.ndarray:
    out = field
    for _ in range(passes):
        padded = np.pad(out, 1, mode="edge")
        out = (
            padded[:-2, :-2] + padded[:-2, 1:-1] + padded[:-2, 2:]
            + padded[1:-1, :-2] + padded[1:-1, 1:-1] + padded[1:-1, 2:]
            + padded[2:, :-2] + padded[2:, 1:-1] + padded[2:, 2:]
        ) / 9.0
    return out


def class_means(classes: int, side: int, seed: int) -> np.ndarray:
    rng = np.random.default_rng(seed)
    means = []
    for _ in range(classes):
        field = _smooth(rng.standard_normal((side, side)))
        field = (field - field.mean()) / (field.std() + 1e-9)
        means.append(np.clip(0.5 + 0.22 * field, 0.03, 0.97))
    return np.stack(means)


def pattern_digits(
    classes: int, per_class: int, side: int, mean_seed: int,
    noise_seed: int | None = None, noise: float = 0.1,
) -> ImageDataset:
    """Deterministic synthetic stand-in for a digit dataset.

    Class mean patterns come from mean_seed; disjoint splits share the
    mean_seed and differ in noise_seed."""
    means = class_means(classes, side, mean_seed)
    rng = np.random.default_rng(mean_seed + 1 if noise_seed is None else noise_seed)
    images = []
    labels = []
    for c in range(classes):
        samples = means[c] + noise * rng.standard_normal((per_class, side, side))
        images.append(np.clip(samples, 0.0, 1.0))
        labels.extend([c] * per_class)
    images = np.concatenate(images)
    labels = np.asarray(labels, dtype=np.int64)
    order = rng.permutation(len(labels))
    quantized = np.round(images[order] * 255.0).astype(np.uint8)
    return ImageDataset(images=quantized, labels=labels[order])


def save_idx(dataset: ImageDataset, images_path, labels_path) -> None:
    n, rows, cols = dataset.images.shape
    with open(images_path, "wb") as f:
        f.write(struct.pack(">IIII", IDX_IMAGES_MAGIC, n, rows, cols))
        f.write(dataset.images.tobytes())
    with open(labels_path, "wb") as f:
        f.write(struct.pack(">II", IDX_LABELS_MAGIC, n))
        f.write(dataset.labels.astype(np.uint8).tobytes())


def load_idx(images_path, labels_path) -> ImageDataset:
    with open(images_path, "rb") as f:
        magic, n, rows, cols = struct.unpack(">IIII", f.read(16))
        if magic != IDX_IMAGES_MAGIC:
            raise ValueError(f"bad IDX image magic 0x{magic:08x}")
        images = np.frombuffer(f.read(n * rows * cols), dtype=np.uint8)
    with open(labels_path, "rb") as f:
        magic, m = struct.unpack(">II", f.read(8))
        if magic != IDX_LABELS_MAGIC:
            raise ValueError(f"bad IDX label magic 0x{magic:08x}")
        labels = np.frombuffer(f.read(m), dtype=np.uint8)
    if n != m:
        raise ValueError(f"{n} images but {m} labels")
    return ImageDataset(
        images=images.reshape(n, rows, cols).copy(),
        labels=labels.astype(np.int64),
    )


def gaussian_blobs(
    classes: int, per_class: int, dimension: int, seed: int,
    mean_scale: float = 3.0, noise: float = 1.0,
    means: np.ndarray | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Plain Gaussian blob vectors (float), for the linear-model check."""
    rng = np.random.default_rng(seed)
    if means is None:
        means = rng.standard_normal((classes, dimension))
        means /= np.linalg.norm(means, axis=1, keepdims=True)
        means *= mean_scale
    xs, ys = [], []
    for c in range(classes):
        xs.append(means[c] + noise * rng.standard_normal((per_class, dimension)))
        ys.extend([c] * per_class)
    x = np.concatenate(xs).astype(np.float32)
    y = np.asarray(ys, dtype=np.int64)
    order = rng.permutation(len(y))
    return x[order], y[order]
