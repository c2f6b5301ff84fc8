"""Datasets: IDX files and seeded synthetic blob images."""

from __future__ import annotations

import gzip
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

IMAGE_MAGIC = 0x00000803
LABEL_MAGIC = 0x00000801


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    images: np.ndarray   # (N, C, H, W) float32, normalized
    labels: np.ndarray   # (N,) int64
    num_classes: int

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(self.images[idx], self.labels[idx], self.num_classes)

    def split(self, val_fraction: float, rng: np.random.Generator) -> tuple["Dataset", "Dataset"]:
        """Seeded train/validation split."""
        n = len(self)
        order = rng.permutation(n)
        n_val = int(round(n * val_fraction))
        return self.subset(np.sort(order[n_val:])), self.subset(np.sort(order[:n_val]))


def _read_bytes(path) -> bytes:
    path = Path(path)
    opener = gzip.open if path.suffix == ".gz" else open
    with opener(path, "rb") as fh:
        return fh.read()


def _parse_idx(raw: bytes, magic: int, path) -> np.ndarray:
    if len(raw) < 4:
        raise DataError(f"{path}: truncated header")
    got = struct.unpack(">I", raw[:4])[0]
    if got != magic:
        raise DataError(f"{path}: bad magic 0x{got:08x}, expected 0x{magic:08x}")
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(raw) < header:
        raise DataError(f"{path}: truncated header")
    dims = struct.unpack(f">{ndim}I", raw[4:header])
    count = int(np.prod(dims, dtype=np.int64))
    if len(raw) - header < count:
        raise DataError(f"{path}: truncated payload ({len(raw) - header} of {count} bytes)")
    if len(raw) - header > count:
        raise DataError(f"{path}: {len(raw) - header - count} trailing bytes")
    return np.frombuffer(raw, dtype=np.uint8, count=count, offset=header).reshape(dims)


def load_idx(images_path, labels_path, num_classes: int | None = None) -> Dataset:
    """Read an IDX image/label pair; pixels map to [-1, 1] (mean 0.5, std 0.5)."""
    imgs = _parse_idx(_read_bytes(images_path), IMAGE_MAGIC, images_path)
    labels = _parse_idx(_read_bytes(labels_path), LABEL_MAGIC, labels_path).astype(np.int64)
    if imgs.shape[0] != labels.shape[0]:
        raise DataError(f"{imgs.shape[0]} images but {labels.shape[0]} labels")
    classes = int(labels.max()) + 1 if num_classes is None else num_classes
    if labels.size and (labels.min() < 0 or labels.max() >= classes):
        raise DataError(f"labels outside [0, {classes})")
    x = imgs.astype(np.float32) / 255.0
    x = ((x - 0.5) / 0.5)[:, None, :, :]
    return Dataset(x, labels, classes)


def write_idx(path, array: np.ndarray):
    """Write uint8 data as IDX (magic picks images vs labels by rank)."""
    arr = np.asarray(array, dtype=np.uint8)
    magic = 0x00000800 | arr.ndim
    with open(path, "wb") as fh:
        fh.write(struct.pack(">I", magic))
        fh.write(struct.pack(f">{arr.ndim}I", *arr.shape))
        fh.write(arr.tobytes())


def class_templates(classes: int, image_size: int, channels: int, rng: np.random.Generator,
                    blobs: int = 2, width: float = 0.12) -> np.ndarray:
    """A fixed spatial pattern per class: a sum of Gaussian blobs at seeded positions."""
    yy, xx = np.mgrid[0:image_size, 0:image_size] / max(image_size - 1, 1)
    out = np.zeros((classes, channels, image_size, image_size))
    for c in range(classes):
        for ch in range(channels):
            for _ in range(blobs):
                cy, cx = rng.uniform(0.1, 0.9, size=2)
                sign = rng.choice([-1.0, 1.0])
                out[c, ch] += sign * np.exp(-((yy - cy) ** 2 + (xx - cx) ** 2) / (2 * width**2))
    return out


def synth_data(classes: int, samples: int, noise: float, rng: np.random.Generator,
               image_size: int = 16, channels: int = 1) -> Dataset:
    """Gaussian-blob images: class template plus isotropic Gaussian noise.

    Labels cycle through the classes before shuffling, so class counts are
    exactly balanced whenever ``samples`` is a multiple of ``classes``.
    """
    templates = class_templates(classes, image_size, channels, rng)
    labels = np.arange(samples) % classes
    labels = labels[rng.permutation(samples)]
    x = templates[labels] + noise * rng.standard_normal((samples, channels, image_size, image_size))
    return Dataset(x.astype(np.float32), labels.astype(np.int64), classes)
