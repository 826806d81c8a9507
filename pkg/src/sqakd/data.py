"""Dataset generation and loading.

Synthetic sets (Gaussian blobs on a circle, interleaved half-moons) are
generated in-process so experiments need no downloads; IDX image/label files
are supported for optional real-data runs.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, DataError

IDX_IMAGE_MAGIC = 0x00000803
IDX_LABEL_MAGIC = 0x00000801

BLOB_SIGMA = 0.5
BLOB_RADIUS = 3.0


@dataclass
class Dataset:
    """Feature array plus optional integer labels."""

    x: np.ndarray
    y: Optional[np.ndarray]
    n_classes: Optional[int]
    name: str = "dataset"

    def __post_init__(self):
        if self.y is not None and len(self.y) != len(self.x):
            raise DataError(f"{len(self.x)} samples but {len(self.y)} labels")

    def __len__(self) -> int:
        return len(self.x)

    @property
    def has_labels(self) -> bool:
        return self.y is not None

    def subset(self, idx) -> "Dataset":
        return Dataset(self.x[idx], None if self.y is None else self.y[idx], self.n_classes, self.name)

    def without_labels(self) -> "Dataset":
        return Dataset(self.x, None, self.n_classes, self.name)

    @property
    def feature_shape(self):
        return self.x.shape[1:]


def blob_centers(classes: int) -> np.ndarray:
    angles = 2.0 * np.pi * np.arange(classes) / classes
    return np.stack([BLOB_RADIUS * np.cos(angles), BLOB_RADIUS * np.sin(angles)], axis=1)


def gen_blobs(n: int, classes: int, seed: int, sigma: float = BLOB_SIGMA) -> Dataset:
    """Isotropic Gaussian clusters centred on a circle of radius 3."""
    if n < classes:
        raise ConfigError(f"need at least one sample per class: n={n}, classes={classes}")
    rng = np.random.Generator(np.random.PCG64(seed))
    labels = np.arange(n) % classes
    centers = blob_centers(classes)
    x = centers[labels] + sigma * rng.standard_normal((n, 2))
    perm = rng.permutation(n)
    return Dataset(x[perm].astype(np.float32), labels[perm].astype(np.int64), classes, "blobs")


def gen_moons(n: int, seed: int, noise: float = 0.1) -> Dataset:
    """Two interleaved half-circles with Gaussian jitter."""
    rng = np.random.Generator(np.random.PCG64(seed))
    n_out = n // 2
    n_in = n - n_out
    t_out = np.linspace(0.0, np.pi, n_out)
    t_in = np.linspace(0.0, np.pi, n_in)
    outer = np.stack([np.cos(t_out), np.sin(t_out)], axis=1)
    inner = np.stack([1.0 - np.cos(t_in), 1.0 - np.sin(t_in) - 0.5], axis=1)
    x = np.concatenate([outer, inner])
    y = np.concatenate([np.zeros(n_out, dtype=np.int64), np.ones(n_in, dtype=np.int64)])
    x = x + noise * rng.standard_normal(x.shape)
    perm = rng.permutation(n)
    return Dataset(x[perm].astype(np.float32), y[perm], 2, "moons")


def gen_synthetic(kind: str, n: int, classes: int, seed: int, noise: float = 0.1) -> Dataset:
    if n < classes:
        raise ConfigError(f"need at least one sample per class: n={n}, classes={classes}")
    if kind == "blobs":
        return gen_blobs(n, classes, seed)
    if kind == "moons":
        if classes != 2:
            raise ConfigError(f"moons is a two-class dataset, got classes={classes}")
        return gen_moons(n, seed, noise=noise)
    raise ConfigError(f"unknown synthetic dataset '{kind}'")


def _read_idx_header(blob: bytes, path: str, expected_magic: int, n_dims: int):
    header = 4 + 4 * n_dims
    if len(blob) < header:
        raise DataError(f"{path}: truncated IDX header")
    magic = struct.unpack(">i", blob[:4])[0]
    if magic != expected_magic:
        raise DataError(f"{path}: bad IDX magic 0x{magic:08x}, expected 0x{expected_magic:08x}")
    dims = struct.unpack(f">{n_dims}i", blob[4:header])
    return dims, blob[header:]


def load_idx(images_path: str, labels_path: Optional[str] = None) -> Dataset:
    """Load an IDX image file (and optionally its label file).

    Images come back as float32 in [0, 1] with shape [N, 1, H, W]; labels as
    int64. The sample counts of the two files must agree.
    """
    with open(images_path, "rb") as f:
        blob = f.read()
    (n, h, w), payload = _read_idx_header(blob, images_path, IDX_IMAGE_MAGIC, 3)
    if len(payload) != n * h * w:
        raise DataError(f"{images_path}: payload holds {len(payload)} bytes, header promises {n * h * w}")
    x = np.frombuffer(payload, dtype=np.uint8).astype(np.float32) / 255.0
    x = x.reshape(n, 1, h, w)

    if labels_path is None:
        return Dataset(x, None, None, "idx")

    with open(labels_path, "rb") as f:
        blob = f.read()
    (n_labels,), payload = _read_idx_header(blob, labels_path, IDX_LABEL_MAGIC, 1)
    if len(payload) != n_labels:
        raise DataError(f"{labels_path}: payload holds {len(payload)} bytes, header promises {n_labels}")
    if n_labels != n:
        raise DataError(f"image/label count mismatch: {n} images, {n_labels} labels")
    y = np.frombuffer(payload, dtype=np.uint8).astype(np.int64)
    return Dataset(x, y, int(y.max()) + 1 if n_labels else 0, "idx")


def train_test_split(ds: Dataset, test_fraction: float, seed: int):
    if not 0.0 < test_fraction < 1.0:
        raise ConfigError(f"test fraction must be in (0, 1), got {test_fraction}")
    rng = np.random.Generator(np.random.PCG64(seed))
    perm = rng.permutation(len(ds))
    n_test = max(1, int(round(len(ds) * test_fraction)))
    return ds.subset(perm[n_test:]), ds.subset(perm[:n_test])
