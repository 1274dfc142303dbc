"""Dense float64 linear algebra helpers and the seeded random stream.

Tensors are plain ``numpy.ndarray`` objects of rank 1 or 2 with dtype
float64.  The helpers here only add shape checking and a stable RNG on top.
"""

from __future__ import annotations

import numpy as np

Tensor = np.ndarray


class DimensionError(ValueError):
    """Raised when operand shapes are incompatible."""


def as_tensor(data, shape=None) -> Tensor:
    arr = np.array(data, dtype=np.float64)
    if shape is not None:
        arr = arr.reshape(shape)
    if arr.ndim not in (1, 2) or 0 in arr.shape:
        raise DimensionError(f"tensors must have rank 1 or 2 with positive dims, got {arr.shape}")
    return arr


def matmul(a: Tensor, b: Tensor) -> Tensor:
    """Matrix-matrix or matrix-vector product with shape checking."""
    if a.ndim != 2 or b.ndim not in (1, 2):
        raise DimensionError(f"matmul expects rank-2 @ rank-1|2, got {a.shape} @ {b.shape}")
    if a.shape[1] != b.shape[0]:
        raise DimensionError(f"inner dimensions differ: {a.shape} @ {b.shape}")
    return a @ b


def frobenius_norm_sq(a: Tensor) -> float:
    a = np.asarray(a, dtype=np.float64)
    return float(np.sum(a * a))


def trace_inner(a: Tensor, b: Tensor) -> float:
    """Tr(a^T b), i.e. the Frobenius inner product of two equal-shape matrices."""
    if a.shape != b.shape:
        raise DimensionError(f"trace inner product needs equal shapes, got {a.shape} and {b.shape}")
    return float(np.sum(a * b))


class Rng:
    """Counter-based random stream (Philox-4x64) keyed by ``seed`` and a split path.

    ``split(i)`` derives an independent child stream from ``(seed, path + (i,))``
    through numpy's ``SeedSequence`` spawn keys, so shards never need to draw in
    sequence to get reproducible, non-overlapping streams.
    """

    def __init__(self, seed: int, path: tuple[int, ...] = ()):
        if seed < 0 or seed >= 2**64:
            raise ValueError("seed must be an unsigned 64-bit integer")
        self.seed = int(seed)
        self.path = tuple(int(p) for p in path)
        seq = np.random.SeedSequence(self.seed, spawn_key=self.path)
        self._gen = np.random.Generator(np.random.Philox(seq))

    def split(self, index: int) -> Rng:
        return Rng(self.seed, self.path + (index,))

    def normal(self, shape, std: float = 1.0) -> Tensor:
        if std < 0:
            raise ValueError("std must be non-negative")
        if std == 0:
            return np.zeros(shape)
        return self._gen.standard_normal(shape) * std

    def uniform(self, shape, low: float = 0.0, high: float = 1.0) -> Tensor:
        return self._gen.uniform(low, high, shape)

    def integers(self, high: int, size=None):
        return self._gen.integers(0, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def choice(self, n: int, size: int) -> np.ndarray:
        return np.sort(self._gen.choice(n, size=size, replace=False))


def gaussian(rng: Rng, shape, std: float = 1.0) -> Tensor:
    """I.i.d. N(0, std^2) draws from ``rng``."""
    return rng.normal(shape, std)
