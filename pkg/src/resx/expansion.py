"""Ensemble terms of the residual expansion and exact path enumeration for linear branches.

For a network f = D o R o E with blocks z -> z + lam * F_i(z):

    f(x) = M0(x) + lam * M1(x) + lam^2 * M2(x) + O(lam^3)

    M0 = W_dec E(x) + b_dec
    M1 = sum_i        W_dec F_i(E(x))
    M2 = sum_{i < j}  W_dec F_j'(E(x)) F_i(E(x))

All ``order*`` functions return the unscaled sums; callers apply powers of lam.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from resx.autodiff import jvp
from resx.model import (
    ModelConfig,
    ResidualNetParams,
    branch_forward,
    branch_graph,
    decode,
    encode,
    forward,
)

MAX_ENUM_DEPTH = 20
MAX_COUNT_DEPTH = 62

PathSubset = tuple[int, ...]


class UnsupportedBranchError(ValueError):
    pass


class SizeGuardError(ValueError):
    pass


def order0(params: ResidualNetParams, config: ModelConfig, x):
    return decode(params, encode(params, x))


def _branch_outputs(params, config, z):
    g = branch_graph(config)
    return g, [branch_forward(params, config, i, z, g) for i in range(1, config.n + 1)]


def order1(params: ResidualNetParams, config: ModelConfig, x):
    z = encode(params, x)
    _, outs = _branch_outputs(params, config, z)
    total = np.zeros_like(z)
    for f in outs:
        total = total + f
    return total @ params.dec_W.T


def order2_terms(params: ResidualNetParams, config: ModelConfig, x):
    """Yield ``((i, j), W_dec F_j'(z) F_i(z))`` for every pair i < j, in lexicographic order."""
    z = encode(params, x)
    g, outs = _branch_outputs(params, config, z)
    for i in range(1, config.n + 1):
        for j in range(i + 1, config.n + 1):
            t = jvp(g, params.branches[j - 1], z, outs[i - 1])
            yield (i, j), t @ params.dec_W.T


def order2(params: ResidualNetParams, config: ModelConfig, x):
    z = encode(params, x)
    total = np.zeros(z.shape[:-1] + (config.d_out,))
    for _, term in order2_terms(params, config, x):
        total = total + term
    return total


@dataclass
class ExpansionReport:
    probe_x: np.ndarray
    lam: float
    n: int
    m0: np.ndarray
    m1: np.ndarray
    m2: np.ndarray
    truncated_0: np.ndarray
    truncated_1: np.ndarray
    truncated_2: np.ndarray
    remainder_norms: tuple[float, float, float]

    def to_json(self) -> dict:
        return {
            "lambda": self.lam,
            "n": self.n,
            "remainders": [float(r) for r in self.remainder_norms],
            "m_norms": [float(np.linalg.norm(m)) for m in (self.m0, self.m1, self.m2)],
        }


def expand(params: ResidualNetParams, config: ModelConfig, x, terms=None) -> ExpansionReport:
    """Truncated expansions of orders 0..2 at ``x`` and their distance to the exact forward.

    ``terms`` may pass precomputed ``(m0, m1, m2)``; they do not depend on lam.
    """
    x = np.asarray(x, dtype=np.float64)
    m0, m1, m2 = terms if terms is not None else (
        order0(params, config, x), order1(params, config, x), order2(params, config, x))
    lam = config.lam
    t0 = m0
    t1 = m0 + lam * m1
    t2 = t1 + lam**2 * m2
    exact = forward(params, config, x)
    rem = tuple(float(np.linalg.norm(exact - t)) for t in (t0, t1, t2))
    return ExpansionReport(x, lam, config.n, m0, m1, m2, t0, t1, t2, rem)


def loglog_slope(xs, ys) -> float:
    """Least-squares slope of log(ys) against log(xs)."""
    return float(np.polyfit(np.log(xs), np.log(ys), 1)[0])


def remainder_slopes(params: ResidualNetParams, config: ModelConfig, x, lambdas) -> tuple[list[float], np.ndarray]:
    """Fit the log-log slope of each remainder norm over ``lambdas``.

    Returns ``(slopes, remainders)`` with ``remainders[l, k]`` for lambda ``l`` and order ``k``.
    """
    terms = (order0(params, config, x), order1(params, config, x), order2(params, config, x))
    rem = np.array([expand(params, replace(config, lam=float(lam)), x, terms).remainder_norms
                    for lam in lambdas])
    return [loglog_slope(lambdas, rem[:, k]) for k in range(3)], rem


def _require_linear(config: ModelConfig):
    if config.branch_kind != "linear":
        raise UnsupportedBranchError("path enumeration needs linear branches")
    if config.n > MAX_ENUM_DEPTH:
        raise SizeGuardError(f"path enumeration is capped at n={MAX_ENUM_DEPTH} (got n={config.n})")


def _path_terms(mats, z, lam):
    # Depth-first over include/skip decisions; each node costs one matvec.
    terms: dict[PathSubset, np.ndarray] = {}
    n = len(mats)

    def visit(i, subset, v):
        if i == n:
            terms[subset] = v
            return
        visit(i + 1, subset, v)
        visit(i + 1, subset + (i + 1,), lam * (v @ mats[i].T))

    visit(0, (), np.asarray(z, dtype=np.float64))
    return terms


def enumerate_paths_linear(params: ResidualNetParams, config: ModelConfig, z) -> dict[PathSubset, np.ndarray]:
    """Every path term lam^|S| A_{s_k} ... A_{s_1} z of the linear tower, keyed by the increasing subset S."""
    _require_linear(config)
    return _path_terms([br["A"] for br in params.branches], z, config.lam)


def sum_paths(terms: dict[PathSubset, np.ndarray]):
    total = None
    for key in sorted(terms, key=lambda s: (len(s), s)):
        total = terms[key] if total is None else total + terms[key]
    return total


def linear_orders(params: ResidualNetParams, config: ModelConfig, x) -> list[np.ndarray]:
    """Unscaled M_0..M_n for linear branches, from paths grouped by subset size."""
    _require_linear(config)
    z = encode(params, x)
    terms = _path_terms([br["A"] for br in params.branches], z, 1.0)
    orders = [np.zeros(z.shape[:-1] + (config.d_out,)) for _ in range(config.n + 1)]
    for key in sorted(terms, key=lambda s: (len(s), s)):
        orders[len(key)] = orders[len(key)] + terms[key] @ params.dec_W.T
    orders[0] = orders[0] + params.dec_b
    return orders


def path_count(n: int, k: int) -> int:
    """Number of ensemble terms of order k in an n-block tower, C(n, k)."""
    if n > MAX_COUNT_DEPTH:
        raise OverflowError(f"path counts are limited to n <= {MAX_COUNT_DEPTH}")
    if not 0 <= k <= n:
        raise ValueError("need 0 <= k <= n")
    return math.comb(n, k)


def total_paths(n: int) -> int:
    if n > MAX_COUNT_DEPTH:
        raise OverflowError(f"path counts are limited to n <= {MAX_COUNT_DEPTH}")
    if n < 0:
        raise ValueError("n must be non-negative")
    return 1 << n
