"""Geometric complexity (mean squared Frobenius norm of the input-output Jacobian).

To first order in lam,

    GC(f) = ||W_dec W_enc||_F^2 + 2 lam * mean_x Tr(A^T B(x)) + O(lam^2)

with A = W_dec W_enc and B(x) = sum_i W_dec F_i'(E(x)) W_enc.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass

import numpy as np

from resx.autodiff import NonFiniteError, jacobian, jvp
from resx.model import (
    ModelConfig,
    ResidualNetParams,
    base_affine,
    branch_graph,
    encode,
    forward,
    network_graph,
)
from resx.tensor import Rng, frobenius_norm_sq

GC_SUBSAMPLE_CAP = 512
_CHUNK = 256


@dataclass
class GcReport:
    gc_exact: float
    gc_base: float
    cross_term: float
    gc_first_order: float
    remainder: float

    def to_json(self) -> dict:
        return {k: float(v) for k, v in asdict(self).items()}


def _inputs(dataset) -> np.ndarray:
    x = getattr(dataset, "inputs", dataset)
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    if x.shape[0] == 0:
        raise ValueError("dataset must be non-empty")
    return x


def subsample(dataset, rng: Rng, cap: int = GC_SUBSAMPLE_CAP) -> np.ndarray:
    """Seeded subset of at most ``cap`` inputs, kept in dataset order."""
    x = _inputs(dataset)
    if x.shape[0] <= cap:
        return x
    return x[rng.choice(x.shape[0], cap)]


def network_jacobians(params: ResidualNetParams, config: ModelConfig, x) -> np.ndarray:
    """Per-sample Jacobians, shape ``(B, d_out, d_in)``.

    A non-finite value raises :class:`NonFiniteError` with ``sample`` set to the
    index of the first offending input.
    """
    x = _inputs(x)
    g, flat = network_graph(config), params.flat()
    out = []
    for start in range(0, x.shape[0], _CHUNK):
        chunk = x[start:start + _CHUNK]
        try:
            out.append(jacobian(g, flat, chunk))
        except NonFiniteError as exc:
            for k in range(chunk.shape[0]):
                try:
                    jacobian(g, flat, chunk[k])
                except NonFiniteError:
                    exc.sample = start + k
                    raise exc from None
            raise
    return np.concatenate(out)


def geometric_complexity(params: ResidualNetParams, config: ModelConfig, dataset) -> float:
    jac = network_jacobians(params, config, dataset)
    return float(np.sum(jac * jac)) / jac.shape[0]


def cross_term(params: ResidualNetParams, config: ModelConfig, dataset) -> float:
    """mean_x Tr(A^T B(x)), the coefficient of 2 lam in the first-order GC."""
    x = _inputs(dataset)
    a, _ = base_affine(params)
    z = encode(params, x)
    g = branch_graph(config)
    # d_in tangents per sample: the columns of W_enc.
    tangents = np.broadcast_to(params.enc_W.T, (x.shape[0],) + params.enc_W.T.shape)
    acc = np.zeros((x.shape[0], config.d_in, config.d_e))
    for br in params.branches:
        acc = acc + jvp(g, br, z, tangents)
    b = np.swapaxes(acc, 1, 2)  # (B, d_e, d_in)
    b = params.dec_W @ b  # (B, d_out, d_in)
    return float(np.sum(a[None] * b)) / x.shape[0]


def gc_first_order(params: ResidualNetParams, config: ModelConfig, dataset) -> GcReport:
    exact = geometric_complexity(params, config, dataset)
    a, _ = base_affine(params)
    base = frobenius_norm_sq(a)
    cross = cross_term(params, config, dataset)
    first = base + 2.0 * config.lam * cross
    return GcReport(exact, base, cross, first, abs(exact - first))


def fd_geometric_complexity(params: ResidualNetParams, config: ModelConfig, dataset, h: float = 1e-5) -> float:
    """GC from central finite-difference Jacobians; an independent check of the autodiff path."""
    x = _inputs(dataset)
    total = 0.0
    for row in x:
        cols = []
        for k in range(config.d_in):
            e = np.zeros(config.d_in)
            e[k] = h
            cols.append((forward(params, config, row + e) - forward(params, config, row - e)) / (2 * h))
        total += frobenius_norm_sq(np.stack(cols, axis=1))
    return total / x.shape[0]
