"""Small labelled datasets: synthetic blobs/rings and IDX image files."""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

from resx.tensor import Rng

IDX_IMAGES_MAGIC = 0x00000803
IDX_LABELS_MAGIC = 0x00000801


@dataclass
class Dataset:
    inputs: np.ndarray  # (N, d_in)
    labels: np.ndarray  # (N,) int64
    classes: int
    split: str = "train"

    def __post_init__(self):
        self.inputs = np.atleast_2d(np.asarray(self.inputs, dtype=np.float64))
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if len(self.inputs) == 0 or len(self.inputs) != len(self.labels):
            raise ValueError("dataset needs the same non-zero number of inputs and labels")
        if self.labels.min() < 0 or self.labels.max() >= self.classes:
            raise ValueError(f"labels must lie in 0..{self.classes - 1}")

    def __len__(self):
        return len(self.labels)

    @property
    def d_in(self) -> int:
        return self.inputs.shape[1]


def make_synthetic(kind: str, n_samples: int, classes: int, d_in: int, noise: float, seed: int):
    """Deterministic point clouds split 80/20 into ``(train, test)``.

    ``blobs``: one Gaussian blob per class around well separated centres.
    ``rings``: class c lies on a circle of radius 1 + c in the first two
    coordinates (not linearly separable); further coordinates are pure noise.
    """
    if n_samples < 2 * classes:
        raise ValueError("need at least two samples per class")
    rng = Rng(seed)
    labels = np.arange(n_samples) % classes
    if kind == "blobs":
        centres = rng.split(0).normal((classes, d_in), 5.0)
        x = centres[labels] + rng.split(1).normal((n_samples, d_in), noise)
    elif kind == "rings":
        if d_in < 2:
            raise ValueError("rings need d_in >= 2")
        theta = rng.split(0).uniform(n_samples, 0.0, 2 * np.pi)
        radius = 1.0 + labels
        x = rng.split(1).normal((n_samples, d_in), noise)
        x[:, 0] += radius * np.cos(theta)
        x[:, 1] += radius * np.sin(theta)
    else:
        raise ValueError(f"unknown dataset kind {kind!r}")
    order = rng.split(2).permutation(n_samples)
    x, labels = x[order], labels[order]
    cut = int(round(0.8 * n_samples))
    return (Dataset(x[:cut], labels[:cut], classes, "train"),
            Dataset(x[cut:], labels[cut:], classes, "test"))


class IdxFormatError(ValueError):
    def __init__(self, message: str, offset: int):
        self.offset = offset
        super().__init__(f"{message} (byte offset {offset})")


def _read_idx(blob: bytes, magic: int, what: str):
    if len(blob) < 4:
        raise IdxFormatError(f"{what}: file too short for magic number", len(blob))
    (got,) = struct.unpack_from(">I", blob, 0)
    if got != magic:
        raise IdxFormatError(f"{what}: bad magic 0x{got:08x}, expected 0x{magic:08x}", 0)
    ndim = magic & 0xFF
    header = 4 + 4 * ndim
    if len(blob) < header:
        raise IdxFormatError(f"{what}: truncated dimension header", len(blob))
    dims = struct.unpack_from(f">{ndim}I", blob, 4)
    size = int(np.prod(dims, dtype=np.int64))
    if len(blob) < header + size:
        raise IdxFormatError(f"{what}: expected {size} data bytes, file ends early", len(blob))
    data = np.frombuffer(blob, dtype=np.uint8, count=size, offset=header)
    return data.reshape(dims)


def load_idx_images(images_path, labels_path, limit: int | None = None, classes: int = 10) -> Dataset:
    """Load an IDX image/label pair, pixels scaled to [0, 1] and flattened."""
    if limit is not None and limit <= 0:
        raise ValueError("limit must be positive")
    with open(images_path, "rb") as fh:
        images = _read_idx(fh.read(), IDX_IMAGES_MAGIC, "images")
    with open(labels_path, "rb") as fh:
        labels = _read_idx(fh.read(), IDX_LABELS_MAGIC, "labels")
    if images.shape[0] != labels.shape[0]:
        raise IdxFormatError(f"{images.shape[0]} images but {labels.shape[0]} labels", 4)
    x = images.reshape(images.shape[0], -1).astype(np.float64) / 255.0
    y = labels.astype(np.int64)
    if limit is not None:
        x, y = x[:limit], y[:limit]
    return Dataset(x, y, max(classes, int(y.max()) + 1), "train")
