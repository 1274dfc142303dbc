"""Desk-scale experiments: explosion sweeps, training runs, lambda capacity sweeps, depth embedding."""

from __future__ import annotations

import csv
import io
import json
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from resx.autodiff import NonFiniteError, forward as graph_forward, vjp
from resx.complexity import GC_SUBSAMPLE_CAP, geometric_complexity, subsample
from resx.data import Dataset
from resx.model import (
    ModelConfig,
    ResidualNetParams,
    forward,
    init,
    network_graph,
    residual_tower,
    zero_pad_depth,
)
from resx.tensor import Rng

NAMED_RULES = ("one", "inv_n", "inv_sqrt_n")
# lam = n^p grid of the n=16 capacity sweep; the largest values are expected to diverge.
CAPACITY_GRID = ("0", "n^-2", "n^-1.5", "n^-1.2", "n^-1", "n^-0.8", "n^-0.5")
CAPACITY_GRID_EXTENDED = CAPACITY_GRID + ("n^-0.4", "n^-0.3", "1")

CSV_HEADER = ("n", "lambda_rule", "lambda", "seed", "step", "train_loss", "test_acc", "gc", "diverged", "frozen")
EXPLOSION_HEADER = ("n", "lambda_rule", "lambda", "seed", "gain", "diverged", "diverged_block")


def resolve_lambda(rule: str, n: int) -> tuple[str, float]:
    """Map a rule name, ``n^p`` power, or number to ``(rule_label, lam)``."""
    rule = str(rule).strip()
    if rule == "one":
        return rule, 1.0
    if rule in ("inv_n", "inv_sqrt_n"):
        if n < 1:
            raise ValueError(f"rule {rule} needs n >= 1")
        return rule, 1.0 / n if rule == "inv_n" else 1.0 / math.sqrt(n)
    if rule.startswith("n^"):
        return "explicit", float(n) ** float(rule[2:])
    lam = float(rule)
    if not lam >= 0:
        raise ValueError(f"lambda must be non-negative, got {rule}")
    return "explicit", lam


def fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, (bool, np.bool_)):
        return "1" if value else "0"
    if isinstance(value, float):
        return "%.17g" % value
    return str(value)


@dataclass
class TrainConfig:
    steps: int = 2000
    batch_size: int = 64
    learning_rate: float = 0.05
    momentum: float = 0.9
    seed: int = 0
    gc_log_every: int = 0
    eval_every: int = 0  # 0: every steps // 20
    gc_subsample: bool = False  # cap GC logging at GC_SUBSAMPLE_CAP seeded samples
    loss: str = "softmax_cross_entropy"

    def validate(self, train_size: int):
        if self.steps <= 0 or self.batch_size <= 0:
            raise ValueError("steps and batch_size must be positive")
        if self.batch_size > train_size:
            raise ValueError("batch_size exceeds the training set")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be positive")
        if not 0 <= self.momentum < 1:
            raise ValueError("momentum must lie in [0, 1)")
        if self.gc_log_every < 0:
            raise ValueError("gc_log_every must be >= 0")
        if self.loss != "softmax_cross_entropy":
            raise ValueError(f"unsupported loss {self.loss}")


@dataclass
class ExperimentRecord:
    n: int
    lambda_rule: str
    lam: float
    seed: int
    step: int
    train_loss: float | None = None
    test_acc: float | None = None
    gc: float | None = None
    diverged: bool = False
    frozen: bool = False

    def row(self) -> list[str]:
        return [fmt(v) for v in (self.n, self.lambda_rule, self.lam, self.seed, self.step, self.train_loss,
                                 self.test_acc, self.gc, self.diverged, self.frozen)]


@dataclass
class ExplosionRecord:
    n: int
    lambda_rule: str
    lam: float
    seed: int
    gain: float | None
    profile: list[float] = field(default_factory=list)
    diverged: bool = False
    diverged_block: int | None = None

    def row(self) -> list[str]:
        return [fmt(v) for v in (self.n, self.lambda_rule, self.lam, self.seed, self.gain,
                                 self.diverged, self.diverged_block)]


def to_csv(records, header=CSV_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    for r in records:
        w.writerow(r.row())
    return buf.getvalue()


def dump_json(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True, default=_json_default) + "\n"


def _json_default(obj):
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    if isinstance(obj, np.generic):
        return obj.item()
    if hasattr(obj, "value"):
        return obj.value
    raise TypeError(f"cannot serialise {type(obj).__name__}")


def config_dict(config) -> dict:
    return {k: (v.value if hasattr(v, "value") else v) for k, v in asdict(config).items()}


# -- losses -------------------------------------------------------------------

def softmax_xent(logits: np.ndarray, labels: np.ndarray):
    """Mean cross-entropy and its gradient with respect to the logits."""
    shifted = logits - logits.max(axis=1, keepdims=True)
    logz = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    logp = shifted - logz
    idx = np.arange(len(labels))
    loss = -float(logp[idx, labels].mean())
    grad = np.exp(logp)
    grad[idx, labels] -= 1.0
    return loss, grad / len(labels)


def dataset_loss(params: ResidualNetParams, config: ModelConfig, dataset: Dataset) -> float:
    return softmax_xent(forward(params, config, dataset.inputs), dataset.labels)[0]


def accuracy(params: ResidualNetParams, config: ModelConfig, dataset: Dataset) -> float:
    logits = forward(params, config, dataset.inputs)
    return float(np.mean(np.argmax(logits, axis=1) == dataset.labels))


# -- training -----------------------------------------------------------------

@dataclass
class TrainResult:
    records: list[ExperimentRecord]
    params: ResidualNetParams
    losses: list[float]
    diverged: bool
    frozen: bool


def is_frozen(losses: list[float], steps: int, tol: float = 0.01, fraction: float = 0.2) -> bool:
    """Loss stayed within ``tol`` (relative) of its initial value over the first ``fraction`` of steps."""
    window = max(1, int(math.ceil(fraction * steps)))
    if len(losses) < window:
        return False
    first = losses[0]
    return all(abs(l - first) <= tol * abs(first) for l in losses[:window])


def train(params: ResidualNetParams, config: ModelConfig, tcfg: TrainConfig, train_set: Dataset,
          test_set: Dataset, lambda_rule: str = "explicit") -> TrainResult:
    """Minibatch SGD with momentum on softmax cross-entropy.

    A non-finite loss, gradient or activation stops the run; the last record
    then carries ``diverged`` and no metrics.
    """
    tcfg.validate(len(train_set))
    graph = network_graph(config)
    flat = {k: v.copy() for k, v in params.flat().items()}
    velocity = {k: np.zeros_like(v) for k, v in flat.items()}
    shuffle_rng = Rng(tcfg.seed).split(1)
    gc_rng = Rng(tcfg.seed).split(2)
    eval_every = tcfg.eval_every or max(1, tcfg.steps // 20)
    gc_inputs = None
    if tcfg.gc_log_every > 0:
        cap = GC_SUBSAMPLE_CAP if tcfg.gc_subsample else len(train_set)
        gc_inputs = subsample(train_set, gc_rng, cap)

    records: list[ExperimentRecord] = []
    losses: list[float] = []
    base = dict(n=config.n, lambda_rule=lambda_rule, lam=config.lam, seed=tcfg.seed)

    def evaluate(step):
        cur = ResidualNetParams.from_flat(flat, config)
        rec = ExperimentRecord(step=step, train_loss=dataset_loss(cur, config, train_set),
                               test_acc=accuracy(cur, config, test_set), **base)
        if gc_inputs is not None and step % tcfg.gc_log_every == 0:
            rec.gc = geometric_complexity(cur, config, gc_inputs)
        return rec

    order = np.empty(0, dtype=np.int64)
    pos = 0
    diverged = False
    with np.errstate(over="ignore", invalid="ignore"):
        for step in range(tcfg.steps + 1):
            try:
                if step % eval_every == 0 or step == tcfg.steps or (
                        gc_inputs is not None and step % tcfg.gc_log_every == 0):
                    rec = evaluate(step)
                    if not math.isfinite(rec.train_loss):
                        raise NonFiniteError(None, None, "loss")
                    records.append(rec)
                if step == tcfg.steps:
                    break
                if pos + tcfg.batch_size > len(order):
                    order = shuffle_rng.permutation(len(train_set))
                    pos = 0
                idx = order[pos:pos + tcfg.batch_size]
                pos += tcfg.batch_size
                logits, cache = graph_forward(graph, flat, train_set.inputs[idx])
                loss, g = softmax_xent(logits, train_set.labels[idx])
                if not math.isfinite(loss):
                    raise NonFiniteError(None, None, "loss")
                losses.append(loss)
                grads, _ = vjp(graph, flat, train_set.inputs[idx], g, cache)
                for k, gk in grads.items():
                    velocity[k] = tcfg.momentum * velocity[k] + gk
                    flat[k] = flat[k] - tcfg.learning_rate * velocity[k]
                    if not np.all(np.isfinite(flat[k])):
                        raise NonFiniteError(None, None, "update")
            except NonFiniteError:
                diverged = True
                records.append(ExperimentRecord(step=step, diverged=True, **base))
                break

    frozen = not diverged and is_frozen(losses, tcfg.steps)
    for rec in records:
        rec.frozen = frozen
    return TrainResult(records, ResidualNetParams.from_flat(flat, config), losses, diverged, frozen)


def final_train_loss(result: TrainResult) -> float | None:
    if result.diverged:
        return None
    return result.records[-1].train_loss


# -- sweeps -------------------------------------------------------------------

def run_jobs(fn, tasks, jobs: int = 1):
    """Map ``fn`` over ``tasks``; results come back in task order whatever ``jobs`` is."""
    if jobs <= 1 or len(tasks) <= 1:
        return [fn(t) for t in tasks]
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(fn, tasks))


def unit_probe(d: int, seed: int) -> np.ndarray:
    z = Rng(seed).split(1000).normal(d)
    return z / np.linalg.norm(z)


def _explosion_one(task) -> ExplosionRecord:
    template, n, rule, seed = task
    label, lam = resolve_lambda(rule, n)
    config = replace(template, n=n, lam=lam)
    params = init(config, Rng(seed))
    z = unit_probe(config.d_e, seed)
    try:
        out, norms = residual_tower(params, config, z)
    except NonFiniteError as exc:
        return ExplosionRecord(n, label, lam, seed, None, [], True, exc.block)
    return ExplosionRecord(n, label, lam, seed, float(np.linalg.norm(out)), [float(v) for v in norms])


def explosion_sweep(depths, lambda_rules, seeds, template: ModelConfig, jobs: int = 1) -> list[ExplosionRecord]:
    """Tower gain ||R(z)|| / ||z|| at random init for each (depth, rule, seed); no training."""
    tasks = [(template, n, rule, seed) for n in depths for rule in lambda_rules for seed in seeds]
    return run_jobs(_explosion_one, tasks, jobs)


@dataclass
class RunSpec:
    template: ModelConfig
    n: int
    rule: str
    tcfg: TrainConfig
    train_set: Dataset
    test_set: Dataset


def run_training(spec: RunSpec) -> TrainResult:
    label, lam = resolve_lambda(spec.rule, spec.n)
    config = replace(spec.template, n=spec.n, lam=lam)
    params = init(config, Rng(spec.tcfg.seed).split(0))
    return train(params, config, spec.tcfg, spec.train_set, spec.test_set, label)


def trainability_sweep(depths, rules, seeds, template: ModelConfig, tcfg: TrainConfig, train_set, test_set,
                       jobs: int = 1) -> list[TrainResult]:
    specs = [RunSpec(template, n, rule, replace(tcfg, seed=seed), train_set, test_set)
             for n in depths for rule in rules for seed in seeds]
    return run_jobs(run_training, specs, jobs)


@dataclass
class CapacitySummary:
    lambda_spec: str
    lam: float
    max_test_acc: list[float | None]
    gc_at_max: list[float | None]
    diverged: list[bool]

    @property
    def mean_max_test_acc(self) -> float | None:
        vals = [v for v in self.max_test_acc if v is not None]
        return float(np.mean(vals)) if vals and not any(self.diverged) else None

    def to_json(self) -> dict:
        return {"lambda_spec": self.lambda_spec, "lambda": self.lam, "max_test_acc": self.max_test_acc,
                "mean_max_test_acc": self.mean_max_test_acc, "gc_at_max": self.gc_at_max,
                "diverged": self.diverged}


def _summarise(result: TrainResult):
    best = None
    for rec in result.records:
        if rec.test_acc is not None and (best is None or rec.test_acc > best.test_acc):
            best = rec
    if best is None:
        return None, None
    gc = best.gc
    if gc is None:  # nearest earlier GC log
        logged = [r for r in result.records if r.gc is not None and r.step <= best.step]
        gc = logged[-1].gc if logged else None
    return best.test_acc, gc


def lambda_capacity_sweep(lambdas, n: int, train_set, test_set, template: ModelConfig, tcfg: TrainConfig,
                          seeds, jobs: int = 1):
    """Learning curves per (lambda, seed) plus per-lambda max test accuracy and the GC at that step.

    ``lambdas`` are specs accepted by :func:`resolve_lambda` and must be ascending.
    """
    values = [resolve_lambda(spec, n)[1] for spec in lambdas]
    if values != sorted(values):
        raise ValueError("lambdas must be sorted ascending")
    specs = [RunSpec(template, n, str(spec), replace(tcfg, seed=seed), train_set, test_set)
             for spec in lambdas for seed in seeds]
    results = run_jobs(run_training, specs, jobs)
    records, summaries = [], []
    for li, spec in enumerate(lambdas):
        chunk = results[li * len(seeds):(li + 1) * len(seeds)]
        accs, gcs = zip(*(_summarise(r) for r in chunk))
        summaries.append(CapacitySummary(str(spec), values[li], list(accs), list(gcs), [r.diverged for r in chunk]))
        for r in chunk:
            records.extend(r.records)
    return records, summaries


def non_decreasing_with_slack(values, slack: float, allowed: int = 1) -> bool:
    """True if ``values`` only ever drop by at most ``slack``, at most ``allowed`` times."""
    drops = [b - a for a, b in zip(values, values[1:]) if b < a]
    return len(drops) <= allowed and all(-d <= slack for d in drops)


def embedding_check(params: ResidualNetParams, config: ModelConfig, dataset: Dataset, extra_depths) -> dict:
    """Dataset loss before and after appending zero branches; deviations must be 0 up to rounding."""
    loss = dataset_loss(params, config, dataset)
    rows = []
    for extra in extra_depths:
        padded, pcfg = zero_pad_depth(params, config, extra)
        padded_loss = dataset_loss(padded, pcfg, dataset)
        rows.append({"extra": int(extra), "n": pcfg.n, "loss": padded_loss, "deviation": abs(padded_loss - loss)})
    return {"n": config.n, "lambda": config.lam, "loss": loss, "padded": rows,
            "max_deviation": max((r["deviation"] for r in rows), default=0.0)}

