import csv
import io
import math
from dataclasses import replace

import numpy as np
import pytest

from resx import experiments as ex
from resx.data import make_synthetic
from resx.model import ModelConfig, init, residual_tower, zero_pad_depth
from resx.tensor import Rng


@pytest.fixture(scope="module")
def rings():
    return make_synthetic("rings", 1000, 2, 2, 0.1, 0)


@pytest.fixture(scope="module")
def blobs():
    return make_synthetic("blobs", 400, 2, 2, 0.5, 0)


def template(d_in=2, d_out=2, branch="mlp", activation="relu"):
    return ModelConfig(d_in, 16, 32, d_out, 0, 0.0, branch, activation)


def test_resolve_lambda():
    assert ex.resolve_lambda("one", 16) == ("one", 1.0)
    assert ex.resolve_lambda("inv_n", 16) == ("inv_n", 1 / 16)
    assert ex.resolve_lambda("inv_sqrt_n", 16) == ("inv_sqrt_n", 0.25)
    assert ex.resolve_lambda("n^-2", 16) == ("explicit", 16.0**-2)
    assert ex.resolve_lambda("0.3", 16) == ("explicit", 0.3)
    with pytest.raises(ValueError):
        ex.resolve_lambda("-1", 4)
    with pytest.raises(ValueError):
        ex.resolve_lambda("inv_n", 0)


def test_capacity_grid_values():
    vals = [ex.resolve_lambda(s, 16)[1] for s in ex.CAPACITY_GRID_EXTENDED]
    assert vals == sorted(vals)
    assert vals[-1] == 1.0 and vals[4] == 1 / 16 and vals[6] == 0.25


def test_csv_format():
    rec = ex.ExperimentRecord(4, "inv_n", 0.1, 0, 10, train_loss=1 / 3, test_acc=0.5, diverged=False)
    text = ex.to_csv([rec])
    rows = list(csv.reader(io.StringIO(text)))
    assert rows[0] == list(ex.CSV_HEADER)
    assert rows[1] == ["4", "inv_n", "0.10000000000000001", "0", "10", "0.33333333333333331", "0.5", "", "0", "0"]


def test_softmax_xent_gradient():
    logits = Rng(0).normal((5, 3))
    labels = np.array([0, 2, 1, 1, 0])
    loss, grad = ex.softmax_xent(logits, labels)
    h = 1e-6
    for k in range(logits.size):
        e = np.zeros_like(logits)
        e.flat[k] = h
        fd = (ex.softmax_xent(logits + e, labels)[0] - ex.softmax_xent(logits - e, labels)[0]) / (2 * h)
        assert abs(fd - grad.flat[k]) < 1e-8


def test_tiny_learning_rate_leaves_params(rings):
    train, test = rings
    config = replace(template(), n=3, lam=0.2)
    params = init(config, Rng(0))
    res = ex.train(params, config, ex.TrainConfig(steps=10, learning_rate=1e-15), train, test)
    for (_, a), (_, b) in zip(params.tensors(), res.params.tensors()):
        assert np.max(np.abs(a - b)) < 1e-12


def test_train_config_validation(rings):
    train, test = rings
    config = replace(template(), n=1, lam=0.1)
    params = init(config, Rng(0))
    with pytest.raises(ValueError):
        ex.train(params, config, ex.TrainConfig(batch_size=10_000), train, test)
    with pytest.raises(ValueError):
        ex.train(params, config, ex.TrainConfig(momentum=1.0), train, test)


def test_blobs_fit_quickly(blobs):
    train, test = blobs
    # blob inputs have norm ~7, so this experiment uses a smaller rate than the rings runs
    tcfg = ex.TrainConfig(steps=2000, learning_rate=0.01, seed=0)
    res = ex.run_training(ex.RunSpec(template(), 8, "inv_sqrt_n", tcfg, train, test))
    assert not res.diverged
    assert ex.final_train_loss(res) < 0.1


def test_affine_base_model_underfits_rings(rings):
    train, test = rings
    res = ex.run_training(ex.RunSpec(template(), 0, "0", ex.TrainConfig(steps=1000, seed=0), train, test))
    assert max(r.test_acc for r in res.records) <= 0.70
    deep = ex.run_training(ex.RunSpec(template(), 8, "inv_sqrt_n", ex.TrainConfig(steps=1000, seed=0), train, test))
    lam0 = ex.run_training(ex.RunSpec(template(), 8, "0", ex.TrainConfig(steps=1000, seed=0), train, test))
    assert ex.final_train_loss(lam0) > ex.final_train_loss(deep)


def test_divergence_is_recorded(rings):
    train, test = rings
    res = ex.run_training(ex.RunSpec(template(), 64, "one", ex.TrainConfig(steps=50), train, test))
    assert res.diverged
    last = res.records[-1]
    assert last.diverged and last.train_loss is None and last.test_acc is None
    assert all(not r.diverged for r in res.records[:-1])


def test_freeze_detector():
    assert ex.is_frozen([1.0, 1.005, 0.995, 1.0, 0.2], steps=20)
    assert not ex.is_frozen([1.0, 0.9, 0.5, 0.4, 0.3], steps=20)
    assert not ex.is_frozen([1.0], steps=20)


def test_training_deterministic(rings):
    train, test = rings
    spec = ex.RunSpec(template(), 4, "inv_n", ex.TrainConfig(steps=60, gc_log_every=20, seed=3), train, test)
    a, b = ex.run_training(spec), ex.run_training(spec)
    assert ex.to_csv(a.records) == ex.to_csv(b.records)


def test_gc_logging(rings):
    train, test = rings
    tcfg = ex.TrainConfig(steps=40, gc_log_every=10, gc_subsample=True)
    res = ex.run_training(ex.RunSpec(template(), 4, "inv_sqrt_n", tcfg, train, test))
    logged = [r for r in res.records if r.gc is not None]
    assert [r.step for r in logged] == [0, 10, 20, 30, 40]
    assert all(math.isfinite(r.gc) for r in logged)


def test_explosion_identity_branches_gain():
    cfg = replace(template(branch="linear"), n=5, lam=1.0)
    params = init(cfg, Rng(0))
    for br in params.branches:
        br["A"] = np.eye(cfg.d_e)
    out, norms = residual_tower(params, cfg, ex.unit_probe(cfg.d_e, 0))
    assert np.linalg.norm(out) == pytest.approx(2.0**5, rel=1e-15)
    assert norms == pytest.approx([2.0, 4.0, 8.0, 16.0, 32.0], rel=1e-15)


def test_explosion_inv_n_bounded_linear():
    depths = [8, 16, 32, 64, 128, 256]
    records = ex.explosion_sweep(depths, ["inv_n"], [0, 1], template(branch="linear"))
    for seed in (0, 1):
        gains = [r.gain for r in records if r.seed == seed]
        assert max(gains) <= 2 * gains[0]
        assert max(gains) <= 2 * min(gains)


def test_explosion_lambda_one_mlp():
    records = ex.explosion_sweep([8, 256], ["one"], [0], template())
    small, big = records
    assert big.diverged or big.gain >= 1e3 * small.gain
    assert len(small.profile) == 8


def test_explosion_divergence_flag():
    cfg = replace(template(branch="linear"), d_e=2, d_in=2)
    records = ex.explosion_sweep([1100], ["100"], [0], cfg)
    assert records[0].diverged and records[0].gain is None and records[0].diverged_block is not None


def test_run_jobs_order():
    assert ex.run_jobs(abs, [-3, 1, -2], jobs=1) == [3, 1, 2]


def test_capacity_sweep_requires_sorted(rings):
    train, test = rings
    with pytest.raises(ValueError):
        ex.lambda_capacity_sweep(["n^-1", "0"], 4, train, test, template(), ex.TrainConfig(steps=5), [0])


def test_capacity_sweep_summary(rings):
    train, test = rings
    tcfg = ex.TrainConfig(steps=40, gc_log_every=10)
    records, summaries = ex.lambda_capacity_sweep(["0", "n^-1"], 4, train, test, template(), tcfg, [0, 1])
    assert [s.lam for s in summaries] == [0.0, 0.25]
    for s in summaries:
        assert len(s.max_test_acc) == 2 and all(g is not None for g in s.gc_at_max)
    assert {r.seed for r in records} == {0, 1}


def test_non_decreasing_with_slack():
    assert ex.non_decreasing_with_slack([50, 60, 60, 70], 0.5)
    assert ex.non_decreasing_with_slack([50, 60, 59.6, 70], 0.5)
    assert not ex.non_decreasing_with_slack([50, 60, 59.0, 70], 0.5)
    assert not ex.non_decreasing_with_slack([50, 49.8, 49.6], 0.5)


def test_embedding_check_exact(rings):
    train, _ = rings
    config = replace(template(), n=3, lam=0.3)
    rep = ex.embedding_check(init(config, Rng(0)), config, train, [1, 32])
    assert [r["n"] for r in rep["padded"]] == [4, 35]
    assert rep["max_deviation"] < 1e-12


def test_padded_network_trains_from_embedded_point(rings):
    train, test = rings
    config = replace(template(), n=3, lam=0.3)
    shallow = ex.train(init(config, Rng(0)), config, ex.TrainConfig(steps=100), train, test).params
    frozen_loss = ex.dataset_loss(shallow, config, train)
    padded, pcfg = zero_pad_depth(shallow, config, 2)
    res = ex.train(padded, pcfg, ex.TrainConfig(steps=100, learning_rate=1e-3), train, test)
    assert ex.dataset_loss(res.params, pcfg, train) <= frozen_loss + 1e-6
