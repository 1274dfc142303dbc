"""Exit criteria, one test per criterion, each at its stated tolerance and runtime budget."""

import math
import time
from dataclasses import replace

import numpy as np
import pytest

from resx import experiments as ex
from resx.cli import main
from resx.complexity import fd_geometric_complexity, gc_first_order, geometric_complexity
from resx.data import make_synthetic
from resx.expansion import enumerate_paths_linear, loglog_slope, path_count, remainder_slopes
from resx.model import ModelConfig, base_affine, decode, encode, forward, init
from resx.tensor import Rng

from conftest import record_criterion

RINGS = dict(kind="rings", n_samples=1000, classes=2, d_in=2, noise=0.1, seed=0)
DESK_MLP = ModelConfig(d_in=2, d_e=16, d_h=32, d_out=2, n=0, lam=0.0, branch_kind="mlp", activation="relu")
DESK_TRAIN = ex.TrainConfig(steps=1000, batch_size=64, learning_rate=0.05, momentum=0.9)


def unit(d, seed):
    v = Rng(seed).split(77).normal(d)
    return v / np.linalg.norm(v)


@pytest.fixture(scope="module")
def rings():
    return make_synthetic(**RINGS)


def linear_path_worst_error():
    worst = 0.0
    for n in range(1, 11):
        for lam in (0.1, 0.5, 1.0):
            config = ModelConfig(6, 8, 8, 3, n, lam, "linear")
            params = init(config, Rng(n))
            x = unit(6, n)
            terms = enumerate_paths_linear(params, config, encode(params, x))
            total = np.zeros(config.d_e)
            for key in sorted(terms, key=lambda s: (len(s), s)):
                total = total + terms[key]
            approx = decode(params, total)
            exact = forward(params, config, x)
            worst = max(worst, float(np.linalg.norm(approx - exact) / np.linalg.norm(exact)))
    return worst


def test_c01_linear_branch_exactness():
    t = time.perf_counter()
    worst = linear_path_worst_error()
    elapsed = time.perf_counter() - t
    ok = worst < 1e-10 and elapsed < 10
    assert record_criterion(1, "2^n path sum equals forward, n<=10", ok,
                            f"max rel err {worst:.2e} (< 1e-10), {elapsed:.2f}s (< 10s)")


def test_c02_remainder_slopes():
    t = time.perf_counter()
    lams = [2.0**-k for k in range(4, 10)]
    slopes = []
    for seed in range(3):
        config = ModelConfig(8, 16, 16, 4, 6, lams[0], "mlp", "tanh")
        params = init(config, Rng(seed))
        s, _ = remainder_slopes(params, config, unit(8, seed), lams)
        slopes.append(s)
    elapsed = time.perf_counter() - t
    ok = all(abs(s[k] - (k + 1)) <= 0.25 for s in slopes for k in range(3)) and elapsed < 30
    detail = "; ".join("[" + ", ".join(f"{v:.3f}" for v in s) + "]" for s in slopes)
    assert record_criterion(2, "remainder slopes k+1 +/- 0.25 (tanh, n=6, 3 seeds)", ok, f"{detail}, {elapsed:.2f}s")


def test_c03_base_model_collapse():
    t = time.perf_counter()
    worst = 0.0
    for kind, act in (("mlp", "relu"), ("mlp", "tanh"), ("linear", "identity")):
        config = ModelConfig(5, 7, 9, 3, 6, 0.0, kind, act)
        params = init(config, Rng(11))
        # arbitrary, large branch parameters
        for i, br in enumerate(params.branches):
            for k in br:
                br[k] = Rng(100 + i).normal(br[k].shape, 10.0)
        w0 = params.dec_W @ params.enc_W
        b0 = params.dec_W @ params.enc_b + params.dec_b
        x = Rng(12).normal((100, 5))
        worst = max(worst, float(np.max(np.abs(forward(params, config, x) - (x @ w0.T + b0)))))
    elapsed = time.perf_counter() - t
    ok = worst < 1e-12 and elapsed < 1
    assert record_criterion(3, "lambda=0 forward equals W_0 x + b_0", ok, f"max abs err {worst:.2e}, {elapsed:.3f}s")


def test_c04_path_counting():
    t = time.perf_counter()
    pascal = [[1]]
    for n in range(1, 63):
        prev = pascal[-1]
        pascal.append([1] + [prev[k - 1] + prev[k] for k in range(1, n)] + [1])
    counts_ok = all(path_count(n, k) == pascal[n][k] for n in range(63) for k in range(n + 1))
    hist_ok = True
    for n in range(0, 13):
        config = ModelConfig(2, 2, 2, 1, n, 0.5, "linear")
        terms = enumerate_paths_linear(init(config, Rng(n)), config, np.ones(2))
        hist = [0] * (n + 1)
        for key in terms:
            hist[len(key)] += 1
        hist_ok &= hist == pascal[n]
    elapsed = time.perf_counter() - t
    ok = counts_ok and hist_ok and elapsed < 1
    assert record_criterion(4, "path_count = Pascal triangle (n<=62), subset histograms match", ok,
                            f"counts {counts_ok}, histograms {hist_ok}, {elapsed:.3f}s")


def test_c05_gc_corollary():
    t = time.perf_counter()
    lams = [2.0**-k for k in range(5, 10)]
    slopes = []
    for seed in range(3):
        config = ModelConfig(6, 16, 16, 4, 4, lams[0], "mlp", "tanh")
        params = init(config, Rng(seed))
        data = Rng(seed).split(5).normal((32, 6))
        rems = [gc_first_order(params, replace(config, lam=l), data).remainder for l in lams]
        slopes.append(loglog_slope(lams, rems))

    config = ModelConfig(6, 8, 8, 4, 4, 0.0, "linear")
    params = init(config, Rng(3))
    for br in params.branches:
        br["A"] = -0.5 * np.eye(config.d_e)
    data = Rng(4).normal((32, 6))
    cross = gc_first_order(params, config, data).cross_term
    gcs = [geometric_complexity(params, replace(config, lam=l), data) for l in (0.0, 1e-3, 1e-2, 5e-2)]
    decreasing = all(a > b for a, b in zip(gcs, gcs[1:]))
    elapsed = time.perf_counter() - t
    ok = all(abs(s - 2) <= 0.3 for s in slopes) and cross < 0 and decreasing and elapsed < 30
    assert record_criterion(5, "GC first-order remainder slope 2 +/- 0.3; negative cross term", ok,
                            f"slopes {[round(s, 3) for s in slopes]}, cross {cross:.3f}, "
                            f"gc decreasing {decreasing}, {elapsed:.2f}s")


def test_c06_gc_vs_finite_differences():
    t = time.perf_counter()
    worst = 0.0
    for seed in range(3):
        config = ModelConfig(6, 16, 16, 4, 4, 0.25, "mlp", "tanh")
        params = init(config, Rng(seed))
        data = Rng(seed).split(6).normal((32, 6))
        exact = geometric_complexity(params, config, data)
        fd = fd_geometric_complexity(params, config, data)
        worst = max(worst, abs(exact - fd) / exact)
    elapsed = time.perf_counter() - t
    ok = worst < 1e-5 and elapsed < 10
    assert record_criterion(6, "exact GC equals finite-difference GC", ok, f"max rel err {worst:.2e}, {elapsed:.2f}s")


def test_c07_loss_embedding(rings):
    train, test = rings
    t = time.perf_counter()
    worst = 0.0
    config = replace(DESK_MLP, n=6, lam=6**-0.5)
    random_params = init(config, Rng(0))
    trained = ex.train(random_params, config, replace(DESK_TRAIN, steps=100), train, test).params
    for params in (random_params, trained):
        rep = ex.embedding_check(params, config, train, list(range(1, 33)))
        worst = max(worst, rep["max_deviation"])
    elapsed = time.perf_counter() - t
    ok = worst < 1e-12 and elapsed < 5
    assert record_criterion(7, "zero-padding by 1..32 blocks keeps the loss", ok,
                            f"max deviation {worst:.2e}, {elapsed:.2f}s")


def test_c08_explosion():
    t = time.perf_counter()
    depths = [8, 32, 128, 256]
    seeds = [0, 1, 2]
    recs = ex.explosion_sweep(depths, ["one", "inv_n", "inv_sqrt_n"], seeds, replace(DESK_MLP, d_in=16, d_out=1))
    gain = {(r.n, r.lambda_rule, r.seed): (math.inf if r.diverged else r.gain) for r in recs}
    ok = True
    growth = []
    for s in seeds:
        g_one = gain[(256, "one", s)] / gain[(8, "one", s)]
        growth.append(g_one)
        ok &= g_one >= 1e3
        base = gain[(8, "inv_n", s)]
        ok &= all(base / 2 <= gain[(n, "inv_n", s)] <= 2 * base for n in depths)
        for n in depths:
            mid = gain[(n, "inv_sqrt_n", s)]
            ok &= math.isfinite(mid) and gain[(n, "inv_n", s)] <= mid <= gain[(n, "one", s)]
    elapsed = time.perf_counter() - t
    ok &= elapsed < 120
    inv_n = [round(gain[(n, "inv_n", 0)], 3) for n in depths]
    mid = [round(gain[(n, "inv_sqrt_n", 0)], 3) for n in depths]
    assert record_criterion(8, "explosion: lambda=1 grows >=1e3x, 1/n within 2x, 1/sqrt(n) between", ok,
                            f"lambda=1 growth {[f'{g:.1e}' for g in growth]}, seed 0 gains 1/n {inv_n}, "
                            f"1/sqrt(n) {mid}, {elapsed:.2f}s")


def test_c09_trainability_ordering(rings):
    train, test = rings
    t = time.perf_counter()
    results = ex.trainability_sweep([64], ["one", "inv_n", "inv_sqrt_n"], [0, 1, 2], DESK_MLP, DESK_TRAIN,
                                    train, test)
    ok = True
    parts = []
    for r in results:
        rule, seed = r.records[0].lambda_rule, r.records[0].seed
        final = ex.final_train_loss(r)
        if rule == "one":
            ok &= r.diverged or r.frozen
            parts.append(f"one/s{seed} {'diverged' if r.diverged else 'frozen' if r.frozen else 'TRAINED'}")
        else:
            ok &= final is not None and final < 0.5
            parts.append(f"{rule}/s{seed} {final:.2e}" if final is not None else f"{rule}/s{seed} diverged")
    elapsed = time.perf_counter() - t
    ok &= elapsed < 600
    assert record_criterion(9, "n=64 rings: lambda=1 fails, 1/n and 1/sqrt(n) reach loss < 0.5", ok,
                            ", ".join(parts) + f", {elapsed:.1f}s")


def test_c10_capacity_trend(rings):
    train, test = rings
    t = time.perf_counter()
    tcfg = replace(DESK_TRAIN, gc_log_every=50)
    _, summaries = ex.lambda_capacity_sweep(["0", "n^-2", "n^-1", "n^-0.5"], 16, train, test, DESK_MLP, tcfg,
                                            [0, 1, 2, 3, 4])
    means = []
    for s in summaries:
        if s.mean_max_test_acc is None:
            break
        means.append(100 * s.mean_max_test_acc)
    gc = [None if s.mean_max_test_acc is None else float(np.mean(s.gc_at_max)) for s in summaries]
    elapsed = time.perf_counter() - t
    ok = len(means) >= 2 and ex.non_decreasing_with_slack(means, 0.5) and elapsed < 900
    assert record_criterion(10, "n=16 capacity sweep: max test accuracy non-decreasing in lambda", ok,
                            f"mean max acc {[round(m, 2) for m in means]} (GC at max, not asserted: "
                            f"{[None if g is None else round(g, 2) for g in gc]}), {elapsed:.1f}s")


def test_c11_reproducibility(tmp_path):
    t = time.perf_counter()
    outputs = []
    for name in ("a", "b"):
        out = tmp_path / name
        code = main(["verify-expansion", "--branch", "linear", "--n", "10", "--seeds", "0,1,2", "--out", str(out)])
        code2 = main(["sweep", "--mode", "explosion", "--depths", "8..256", "--seeds", "0,1", "--out", str(out)])
        outputs.append((code, code2, (out / "verify_expansion.json").read_bytes(),
                        (out / "explosion.csv").read_bytes()))
    elapsed = time.perf_counter() - t
    ok = outputs[0] == outputs[1] and outputs[0][0] == 0
    assert record_criterion(11, "identical flags and seed give byte-identical CSV/JSON", ok,
                            f"exit codes {outputs[0][:2]}, identical {outputs[0] == outputs[1]}, {elapsed:.2f}s")
