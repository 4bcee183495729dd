"""Datasets: CIFAR-10 binary records and a synthetic quadrant-blob generator."""

from __future__ import annotations

import math
import os
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, FormatError

CIFAR_RECORD = 3073
CIFAR_PIXELS = 3072
CIFAR_MEAN = (0.4914, 0.4822, 0.4465)
CIFAR_STD = (0.2470, 0.2435, 0.2616)


@dataclass
class Dataset:
    images: np.ndarray  # (N, C, H, W) float32
    labels: np.ndarray  # (N,) int64
    num_classes: int
    masks: np.ndarray | None = None  # (N, H, W) uint8 ground truth, when known
    blobs: np.ndarray | None = None  # (N, 3) centre x, centre y, radius

    def __len__(self) -> int:
        return len(self.labels)

    def subset(self, idx) -> "Dataset":
        return Dataset(
            self.images[idx],
            self.labels[idx],
            self.num_classes,
            None if self.masks is None else self.masks[idx],
            None if self.blobs is None else self.blobs[idx],
        )


def load_cifar10_binary(path, mean=CIFAR_MEAN, std=CIFAR_STD) -> Dataset:
    """Read 3073-byte records: label byte, then 1024 R, 1024 G, 1024 B bytes."""
    raw = np.fromfile(os.fspath(path), dtype=np.uint8)
    n, rem = divmod(raw.size, CIFAR_RECORD)
    if rem:
        raise FormatError(
            f"{path}: truncated CIFAR-10 record at byte offset {n * CIFAR_RECORD} "
            f"({rem} of {CIFAR_RECORD} bytes present)"
        )
    recs = raw.reshape(n, CIFAR_RECORD)
    labels = recs[:, 0].astype(np.int64)
    bad = np.flatnonzero(labels > 9)
    if bad.size:
        i = int(bad[0])
        raise FormatError(f"{path}: label byte {labels[i]} > 9 at byte offset {i * CIFAR_RECORD}")
    pix = recs[:, 1:].reshape(n, 3, 32, 32).astype(np.float32) / np.float32(255.0)
    m = np.asarray(mean, dtype=np.float32).reshape(1, 3, 1, 1)
    s = np.asarray(std, dtype=np.float32).reshape(1, 3, 1, 1)
    return Dataset((pix - m) / s, labels, 10)


def write_cifar10_binary(path, images_u8: np.ndarray, labels: np.ndarray) -> None:
    """Inverse of the record layout; ``images_u8`` is (N, 3, 32, 32) uint8."""
    images_u8 = np.asarray(images_u8, dtype=np.uint8)
    n = images_u8.shape[0]
    recs = np.empty((n, CIFAR_RECORD), dtype=np.uint8)
    recs[:, 0] = np.asarray(labels, dtype=np.uint8)
    recs[:, 1:] = images_u8.reshape(n, CIFAR_PIXELS)
    recs.tofile(os.fspath(path))


# quadrant c -> (row offset, col offset) in units of half the image
_QUADRANTS = ((0, 0), (0, 1), (1, 0), (1, 1))


@dataclass(frozen=True)
class BlobParams:
    image_size: int = 32
    channels: int = 3
    num_classes: int = 2
    samples: int = 1000
    noise_std: float = 0.5
    amplitude: float = 2.0
    min_radius: float = 3.0
    max_radius: float = 6.0


def generate_synthetic_blobs(params: BlobParams, seed: int) -> Dataset:
    """Class ``c`` puts a bright disc-like Gaussian blob in quadrant ``c`` over noise.

    The blob has integer centre and radius ``r``; its ground-truth mask is
    the pixel disc ``(x - cx)^2 + (y - cy)^2 <= r^2`` and is kept whole
    inside the quadrant. Classes alternate so the set is balanced.
    """
    k = params.num_classes
    if not 2 <= k <= 4:
        raise ConfigError(f"synthetic blobs support 2..4 classes, got {k}")
    s = params.image_size
    half = s // 2
    if params.max_radius < params.min_radius or 2 * math.floor(params.max_radius) + 3 > half:
        raise ConfigError(f"blob radius range {params.min_radius}..{params.max_radius} does not fit a {half}px quadrant")
    rng = np.random.default_rng(seed)
    n = params.samples
    labels = np.arange(n, dtype=np.int64) % k
    rng.shuffle(labels)
    yy, xx = np.mgrid[0:s, 0:s]
    images = np.empty((n, params.channels, s, s), dtype=np.float32)
    masks = np.zeros((n, s, s), dtype=np.uint8)
    blobs = np.empty((n, 3), dtype=np.float64)
    for i in range(n):
        qr, qc = _QUADRANTS[labels[i]]
        r = rng.uniform(params.min_radius, params.max_radius)
        fr = int(math.floor(r))
        # keep one pixel of margin so the disc never touches the quadrant edge
        cx = int(rng.integers(qc * half + fr + 1, qc * half + half - fr - 1))
        cy = int(rng.integers(qr * half + fr + 1, qr * half + half - fr - 1))
        d2 = (xx - cx) ** 2 + (yy - cy) ** 2
        blob = params.amplitude * np.exp(-d2 / (2.0 * (r / 1.5) ** 2))
        noise = rng.normal(0.0, params.noise_std, (params.channels, s, s))
        images[i] = (noise + blob[None]).astype(np.float32)
        masks[i] = d2 <= r * r
        blobs[i] = (cx, cy, r)
    return Dataset(images, labels, k, masks, blobs)
