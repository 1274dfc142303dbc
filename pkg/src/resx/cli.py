"""Command-line front end.

Exit codes: 0 all checks pass, 1 runtime/data failure or failed check, 2 usage error.
"""

from __future__ import annotations

import argparse
import os
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from resx import experiments as ex
from resx.autodiff import NonFiniteError
from resx.complexity import gc_first_order, subsample
from resx.data import IdxFormatError, load_idx_images, make_synthetic
from resx.expansion import (
    SizeGuardError,
    enumerate_paths_linear,
    expand,
    linear_orders,
    path_count,
    remainder_slopes,
    sum_paths,
    total_paths,
    MAX_ENUM_DEPTH,
)
from resx.model import (
    CheckpointError,
    ModelConfig,
    base_affine,
    content_hash,
    encode,
    forward,
    init,
    load_checkpoint,
    residual_tower,
    to_bytes,
)
from resx.tensor import Rng

DEFAULT_OUT = "resx_out"
SLOPE_TOL = 0.25
PATH_REL_TOL = 1e-10
EMBED_TOL = 1e-12


class UsageError(Exception):
    pass


# -- flag parsing helpers -----------------------------------------------------

def int_list(text: str) -> list[int]:
    """``"1,2,3"`` or a doubling range ``"8..256"``."""
    text = text.strip()
    if ".." in text:
        lo, hi = (int(v) for v in text.split(".."))
        if lo <= 0 or hi < lo:
            raise argparse.ArgumentTypeError(f"bad range {text!r}")
        out = []
        while lo <= hi:
            out.append(lo)
            lo *= 2
        return out
    try:
        return [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def parse_number(text: str) -> float:
    text = text.strip()
    if "^" in text:
        base, exp = text.split("^")
        return float(base) ** float(exp)
    return float(text)


def float_list(text: str) -> list[float]:
    """Comma list of numbers; ``2^-4`` style powers allowed; ``2^-4..2^-9`` gives every power in between."""
    text = text.strip()
    try:
        if ".." in text:
            lo, hi = text.split("..")
            base, e0 = lo.split("^")
            _, e1 = hi.split("^")
            e0, e1 = int(e0), int(e1)
            step = 1 if e1 >= e0 else -1
            return [float(base) ** e for e in range(e0, e1 + step, step)]
        return [parse_number(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"bad number list {text!r}") from None


def str_list(text: str) -> list[str]:
    return [v.strip() for v in text.split(",") if v.strip()]


# -- parser -------------------------------------------------------------------

def _common(p):
    p.add_argument("--out", help="output directory (default: $RESX_OUT or ./resx_out)")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--format", choices=("csv", "json"), default="csv", help="format of the main table")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for independent runs")


def _model_flags(p, n=8, branch="mlp", activation="relu"):
    p.add_argument("--n", type=int, default=n, help="number of residual blocks")
    p.add_argument("--branch", choices=("linear", "mlp"), default=branch)
    p.add_argument("--activation", choices=("relu", "tanh", "identity"), default=activation)
    p.add_argument("--d-e", type=int, default=16)
    p.add_argument("--d-h", type=int, default=32)


def _data_flags(p):
    p.add_argument("--data", choices=("blobs", "rings", "idx"), default="rings")
    p.add_argument("--samples", type=int, default=1000)
    p.add_argument("--classes", type=int, default=2)
    p.add_argument("--d-in", type=int, default=2)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--data-seed", type=int, default=0)
    p.add_argument("--idx-images")
    p.add_argument("--idx-labels")
    p.add_argument("--idx-test-images")
    p.add_argument("--idx-test-labels")
    p.add_argument("--limit", type=int)


def _train_flags(p, steps=1000):
    p.add_argument("--steps", type=int, default=steps)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--lr", type=float, default=0.05)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--gc-log-every", type=int, default=0)
    p.add_argument("--gc-subsample", action="store_true", help="cap GC evaluation at 512 seeded samples")


def _lambda_flags(p):
    g = p.add_mutually_exclusive_group()
    g.add_argument("--rule", help="one, inv_n, inv_sqrt_n, or n^p")
    g.add_argument("--lambda", dest="lam", type=float)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="resx", description="Lambda-scaled residual network expansion toolkit")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("verify-expansion", help="check the expansion terms against exact forward passes")
    _common(p)
    _model_flags(p, n=6, branch="mlp", activation="tanh")
    p.add_argument("--d-in", type=int, default=8)
    p.add_argument("--d-out", type=int, default=4)
    p.add_argument("--lambda-grid", type=float_list, default=float_list("2^-4..2^-9"))
    p.add_argument("--seeds", type=int_list, help="comma list; defaults to --seed")

    p = sub.add_parser("sweep", help="explosion, trainability or capacity sweeps")
    _common(p)
    _model_flags(p, n=16)
    _data_flags(p)
    _train_flags(p)
    p.add_argument("--mode", choices=("explosion", "train", "capacity"), default="explosion")
    p.add_argument("--depths", type=int_list, default=int_list("8,32,128,256"))
    p.add_argument("--rules", type=str_list, default=str_list("one,inv_n,inv_sqrt_n"))
    p.add_argument("--lambdas", type=str_list, default=list(ex.CAPACITY_GRID),
                   help="capacity mode: ascending lambda specs (numbers or n^p)")
    p.add_argument("--seeds", type=int_list, help="comma list; defaults to --seed")
    p.add_argument("--loss-threshold", type=float, default=0.5)

    p = sub.add_parser("train", help="train one network")
    _common(p)
    _model_flags(p)
    _data_flags(p)
    _train_flags(p)
    _lambda_flags(p)
    p.add_argument("--checkpoint", help="start from this checkpoint instead of a fresh init")
    p.add_argument("--save", help="checkpoint path (default OUT/model.resx)")
    p.add_argument("--loss-threshold", type=float, default=0.5)

    p = sub.add_parser("gc", help="geometric complexity and its first-order approximation")
    _common(p)
    _model_flags(p)
    _data_flags(p)
    _lambda_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--gc-subsample", action="store_true")

    p = sub.add_parser("embed", help="zero-padding embedding check")
    _common(p)
    _model_flags(p)
    _data_flags(p)
    _lambda_flags(p)
    p.add_argument("--checkpoint")
    p.add_argument("--extra", type=int_list, default=int_list("1,2,4,8,16,32"))

    p = sub.add_parser("paths", help="print ensemble term counts C(n, k) and 2^n")
    _common(p)
    p.add_argument("--max-n", type=int, default=16)
    p.add_argument("--max-k", type=int, default=3)
    return parser


# -- shared plumbing ----------------------------------------------------------

def out_dir(args) -> Path:
    path = Path(args.out or os.environ.get("RESX_OUT") or DEFAULT_OUT)
    path.mkdir(parents=True, exist_ok=True)
    return path


def write(path: Path, text: str) -> None:
    path.write_text(text, encoding="utf-8")
    print(f"wrote {path}")


def report(name: str, ok: bool, detail: str = "") -> bool:
    print(f"{'PASS' if ok else 'FAIL'} {name}" + (f": {detail}" if detail else ""))
    return ok


def load_data(args):
    if args.data == "idx":
        if not (args.idx_images and args.idx_labels):
            raise UsageError("--data idx needs --idx-images and --idx-labels")
        train = load_idx_images(args.idx_images, args.idx_labels, args.limit, args.classes)
        if args.idx_test_images and args.idx_test_labels:
            test = load_idx_images(args.idx_test_images, args.idx_test_labels, args.limit, args.classes)
        else:
            test = train
        classes = max(train.classes, test.classes)
        train.classes = test.classes = classes
        test.split = "test"
        return train, test
    return make_synthetic(args.data, args.samples, args.classes, args.d_in, args.noise, args.data_seed)


def lambda_of(args, n: int) -> tuple[str, float]:
    if getattr(args, "lam", None) is not None:
        return "explicit", args.lam
    return ex.resolve_lambda(args.rule or "inv_sqrt_n", n)


def model_from_args(args, train):
    """Load ``--checkpoint`` or build a fresh init from the model flags; ``--lambda``/``--rule`` override lam."""
    if getattr(args, "checkpoint", None):
        if not os.path.exists(args.checkpoint):
            raise UsageError(f"checkpoint {args.checkpoint} not found")
        params, config = load_checkpoint(args.checkpoint)
        if args.lam is not None or args.rule:
            config = replace(config, lam=lambda_of(args, config.n)[1])
        if config.d_in != train.d_in:
            raise UsageError(f"checkpoint expects d_in={config.d_in}, data has {train.d_in}")
        return params, config, "explicit"
    rule, lam = lambda_of(args, args.n)
    config = ModelConfig(train.d_in, args.d_e, args.d_h, train.classes, args.n, lam, args.branch, args.activation)
    return init(config, Rng(args.seed).split(0)), config, rule


def train_config(args, seed: int) -> ex.TrainConfig:
    return ex.TrainConfig(steps=args.steps, batch_size=args.batch_size, learning_rate=args.lr,
                          momentum=args.momentum, seed=seed, gc_log_every=args.gc_log_every,
                          gc_subsample=args.gc_subsample)


def write_table(out: Path, stem: str, fmt: str, records, header=ex.CSV_HEADER):
    if fmt == "csv":
        write(out / f"{stem}.csv", ex.to_csv(records, header))
    else:
        rows = [dict(zip(header, r.row())) for r in records]
        write(out / f"{stem}.json", ex.dump_json(rows))


# -- subcommands --------------------------------------------------------------

def cmd_verify_expansion(args) -> int:
    if args.branch == "linear" and args.n > MAX_ENUM_DEPTH:
        raise UsageError(f"--n {args.n} exceeds the path-enumeration cap of {MAX_ENUM_DEPTH}")
    seeds = args.seeds or [args.seed]
    lambdas = sorted(args.lambda_grid, reverse=True)
    if len(lambdas) < 2 or min(lambdas) <= 0:
        raise UsageError("--lambda-grid needs at least two positive values")
    out = out_dir(args)
    checks, reports = [], []
    all_ok = True
    for seed in seeds:
        config = ModelConfig(args.d_in, args.d_e, args.d_h, args.d_out, args.n, lambdas[0],
                             args.branch, args.activation)
        params = init(config, Rng(seed))
        x = ex.unit_probe(args.d_in, seed)

        zero = expand(params, replace(config, lam=0.0), x)
        ok = max(zero.remainder_norms) < 1e-12
        all_ok &= report(f"seed {seed} lambda=0 collapses to base model", ok, f"{max(zero.remainder_norms):.3e}")
        checks.append({"seed": seed, "check": "base_model", "pass": ok, "value": max(zero.remainder_norms)})

        slopes, _ = remainder_slopes(params, config, x, lambdas)
        for k, s in enumerate(slopes):
            ok = abs(s - (k + 1)) <= SLOPE_TOL
            all_ok &= report(f"seed {seed} order-{k} remainder slope", ok, f"{s:.4f} (expected {k + 1} +/- {SLOPE_TOL})")
            checks.append({"seed": seed, "check": f"slope_{k}", "pass": ok, "value": s})
        for lam in lambdas:
            reports.append({"seed": seed, **expand(params, replace(config, lam=float(lam)), x).to_json()})

        if args.branch == "linear":
            worst = 0.0
            for lam in sorted(set(lambdas) | {0.1, 0.5, 1.0}):
                cfg = replace(config, lam=lam)
                z = encode(params, x)
                total = sum_paths(enumerate_paths_linear(params, cfg, z))
                exact, _ = residual_tower(params, cfg, z)
                worst = max(worst, float(np.linalg.norm(total - exact) / np.linalg.norm(exact)))
                orders = linear_orders(params, cfg, x)
                full = sum(lam**k * m for k, m in enumerate(orders))
                f = forward(params, cfg, x)
                worst = max(worst, float(np.linalg.norm(full - f) / np.linalg.norm(f)))
            ok = worst < PATH_REL_TOL
            all_ok &= report(f"seed {seed} all-order path sum equals forward", ok, f"max rel err {worst:.3e}")
            checks.append({"seed": seed, "check": "path_enumeration", "pass": ok, "value": worst})

            terms = enumerate_paths_linear(params, config, encode(params, x))
            hist = [0] * (args.n + 1)
            for key in terms:
                hist[len(key)] += 1
            ok = hist == [path_count(args.n, k) for k in range(args.n + 1)]
            all_ok &= report(f"seed {seed} path histogram matches C(n, k)", ok, str(hist))
            checks.append({"seed": seed, "check": "path_histogram", "pass": ok, "value": hist})

    summary = {"config": {"n": args.n, "branch": args.branch, "activation": args.activation, "d_in": args.d_in,
                          "d_e": args.d_e, "d_h": args.d_h, "d_out": args.d_out, "seeds": seeds,
                          "lambda_grid": lambdas},
               "checks": checks, "expansions": reports, "pass": bool(all_ok)}
    write(out / "verify_expansion.json", ex.dump_json(summary))
    return 0 if all_ok else 1


def _sweep_explosion(args, out: Path, seeds) -> int:
    template = ModelConfig(args.d_e, args.d_e, args.d_h, 1, 0, 0.0, args.branch, args.activation)
    records = ex.explosion_sweep(args.depths, args.rules, seeds, template, args.jobs)
    write_table(out, "explosion", args.format, records, ex.EXPLOSION_HEADER)
    # records come back ordered by (depth, rule, seed)
    series = {}
    for i, r in enumerate(records):
        rule = args.rules[(i // len(seeds)) % len(args.rules)]
        xs, ys = series.setdefault(f"{rule} seed {r.seed}", ([], []))
        xs.append(r.n)
        ys.append(r.gain)
    _charts(out, "explosion", series, "tower gain at init", "depth n", "||R(z)|| / ||z||", logx=True, logy=True)
    write(out / "explosion_profiles.json", ex.dump_json(
        [{"n": r.n, "lambda_rule": r.lambda_rule, "lambda": r.lam, "seed": r.seed, "gain": r.gain,
          "diverged": r.diverged, "diverged_block": r.diverged_block, "profile": r.profile} for r in records]))
    return 0


def _sweep_train(args, out: Path, seeds) -> int:
    train, test = load_data(args)
    template = ModelConfig(train.d_in, args.d_e, args.d_h, train.classes, 0, 0.0, args.branch, args.activation)
    results = ex.trainability_sweep(args.depths, args.rules, seeds, template, train_config(args, 0),
                                    train, test, args.jobs)
    records = [rec for r in results for rec in r.records]
    write_table(out, "train_sweep", args.format, records)
    ok = True
    runs = []
    for r in results:
        first = r.records[0]
        final = ex.final_train_loss(r)
        runs.append({"n": first.n, "lambda_rule": first.lambda_rule, "lambda": first.lam, "seed": first.seed,
                     "diverged": r.diverged, "frozen": r.frozen, "final_train_loss": final})
        if first.lambda_rule == "one":
            ok &= report(f"n={first.n} lambda=1 seed {first.seed} diverged or frozen", r.diverged or r.frozen)
        elif first.lambda_rule in ("inv_n", "inv_sqrt_n"):
            ok &= report(f"n={first.n} {first.lambda_rule} seed {first.seed} train loss < {args.loss_threshold}",
                         final is not None and final < args.loss_threshold, f"{final}")
    write(out / "train_sweep.json", ex.dump_json({"learning_rate": args.lr, "steps": args.steps, "runs": runs,
                                                  "pass": bool(ok)}))
    series = {}
    for r in results:
        first = r.records[0]
        pts = [rec for rec in r.records if rec.train_loss is not None]
        series[f"n={first.n} {first.lambda_rule} s{first.seed}"] = ([p.step for p in pts], [p.train_loss for p in pts])
    _charts(out, "train_sweep", series, "training loss", "step", "train loss", logy=True)
    return 0 if ok else 1


def _sweep_capacity(args, out: Path, seeds) -> int:
    train, test = load_data(args)
    template = ModelConfig(train.d_in, args.d_e, args.d_h, train.classes, args.n, 0.0, args.branch, args.activation)
    tcfg = train_config(args, 0)
    if tcfg.gc_log_every == 0:
        tcfg.gc_log_every = tcfg.eval_every or max(1, tcfg.steps // 20)
    try:
        records, summaries = ex.lambda_capacity_sweep(args.lambdas, args.n, train, test, template, tcfg, seeds,
                                                      args.jobs)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    write_table(out, "capacity", args.format, records)
    means = [s.mean_max_test_acc for s in summaries]
    gcs = [float(np.mean([g for g in s.gc_at_max if g is not None])) if s.mean_max_test_acc is not None else None
           for s in summaries]
    stable = []
    for m in means:
        if m is None:
            break
        stable.append(100 * m)
    ok = report("max test accuracy non-decreasing in lambda (one drop <= 0.5 points allowed)",
                ex.non_decreasing_with_slack(stable, 0.5), ", ".join(f"{v:.2f}" for v in stable))
    write(out / "capacity.json", ex.dump_json({"n": args.n, "learning_rate": args.lr, "steps": args.steps,
                                               "seeds": seeds, "summaries": [s.to_json() for s in summaries],
                                               "mean_gc_at_max": gcs, "pass": bool(ok)}))
    lams = [s.lam for s in summaries]
    _charts(out, "capacity_accuracy", {"max test accuracy": (lams, means)}, f"capacity sweep n={args.n}",
            "lambda", "max test accuracy")
    _charts(out, "capacity_gc", {"GC at max accuracy": (lams, gcs)}, f"capacity sweep n={args.n}",
            "lambda", "geometric complexity", png=False)
    from resx.plotting import save_capacity

    save_capacity(out / "capacity.png", lams, means, gcs, args.n)
    curves = {}
    for rec in records:
        if rec.train_loss is not None:
            xs, ys = curves.setdefault(f"lambda={rec.lam:.4g} s{rec.seed}", ([], []))
            xs.append(rec.step)
            ys.append(rec.train_loss)
    _charts(out, "capacity_curves", curves, "learning curves", "step", "train loss", logy=True)
    return 0 if ok else 1


def _charts(out: Path, stem: str, series, title, xlabel, ylabel, logx=False, logy=False, png=True):
    from resx.plotting import save_lines
    from resx.svg import line_chart

    write(out / f"{stem}.svg", line_chart(series, title, xlabel, ylabel, logx, logy))
    if png:
        save_lines(out / f"{stem}.png", series, title, xlabel, ylabel, logx, logy)


def cmd_sweep(args) -> int:
    seeds = args.seeds or [args.seed]
    out = out_dir(args)
    for rule in args.rules:
        try:
            ex.resolve_lambda(rule, 1)
        except ValueError:
            raise UsageError(f"unknown lambda rule {rule!r}") from None
    if args.mode == "explosion":
        return _sweep_explosion(args, out, seeds)
    if args.mode == "train":
        return _sweep_train(args, out, seeds)
    return _sweep_capacity(args, out, seeds)


def cmd_train(args) -> int:
    train, test = load_data(args)
    params, config, rule = model_from_args(args, train)
    out = out_dir(args)
    result = ex.train(params, config, train_config(args, args.seed), train, test, rule)
    write_table(out, "train", args.format, result.records)
    blob = to_bytes(result.params, config)
    save = Path(args.save) if args.save else out / "model.resx"
    save.write_bytes(blob)
    print(f"wrote {save}")
    final = ex.final_train_loss(result)
    ok = final is not None and final < args.loss_threshold
    summary = {"experiment": "train", "model": ex.config_dict(config), "lambda_rule": rule,
               "train": ex.config_dict(train_config(args, args.seed)), "data": _data_echo(args),
               "checkpoint_hash": content_hash(blob), "final_train_loss": final,
               "final_test_acc": None if result.diverged else result.records[-1].test_acc,
               "diverged": result.diverged, "frozen": result.frozen, "pass": bool(ok)}
    write(out / "train.json", ex.dump_json(summary))
    report(f"final train loss below {args.loss_threshold}", ok, f"{final}")
    return 0 if ok else 1


def _data_echo(args) -> dict:
    if args.data == "idx":
        return {"data": "idx", "limit": args.limit}
    return {"data": args.data, "samples": args.samples, "classes": args.classes, "d_in": args.d_in,
            "noise": args.noise, "data_seed": args.data_seed}


def cmd_gc(args) -> int:
    train, _ = load_data(args)
    params, config, rule = model_from_args(args, train)
    inputs = subsample(train, Rng(args.seed).split(2)) if args.gc_subsample else train.inputs
    rep = gc_first_order(params, config, inputs)
    w0, _ = base_affine(params)
    out = out_dir(args)
    summary = {"experiment": "gc", "model": ex.config_dict(config), "lambda_rule": rule, "data": _data_echo(args),
               "samples": int(len(inputs)), "checkpoint_hash": content_hash(to_bytes(params, config)),
               **rep.to_json()}
    write(out / "gc.json", ex.dump_json(summary))
    for k, v in rep.to_json().items():
        print(f"{k} = {v:.17g}")
    if config.lam == 0:
        ok = abs(rep.gc_exact - rep.gc_base) <= 1e-10 * max(1.0, rep.gc_base)
        return 0 if report("lambda=0 GC equals ||W_0||_F^2", ok, f"{rep.gc_exact:.17g}") else 1
    return 0


def cmd_embed(args) -> int:
    train, _ = load_data(args)
    params, config, _ = model_from_args(args, train)
    rep = ex.embedding_check(params, config, train, args.extra)
    out = out_dir(args)
    rep["checkpoint_hash"] = content_hash(to_bytes(params, config))
    write(out / "embed.json", ex.dump_json(rep))
    for row in rep["padded"]:
        print(f"pad +{row['extra']}: deviation {row['deviation']:.3e}")
    ok = rep["max_deviation"] < EMBED_TOL
    report("zero-padded networks keep the dataset loss", ok, f"max deviation {rep['max_deviation']:.3e}")
    return 0 if ok else 1


def cmd_paths(args) -> int:
    if not 0 <= args.max_n <= 62:
        raise UsageError("--max-n must lie in 0..62")
    ks = list(range(1, args.max_k + 1))
    header = ["n", "total"] + [f"C(n,{k})" for k in ks]
    rows = [[n, total_paths(n)] + [path_count(n, k) if k <= n else 0 for k in ks] for n in range(args.max_n + 1)]
    widths = [max(len(str(v)) for v in col) for col in zip(header, *rows)]
    for row in [header] + rows:
        print("  ".join(str(v).rjust(w) for v, w in zip(row, widths)))
    out = out_dir(args)
    if args.format == "csv":
        write(out / "paths.csv", "\n".join(",".join(str(v) for v in r) for r in [header] + rows) + "\n")
    else:
        write(out / "paths.json", ex.dump_json([dict(zip(header, r)) for r in rows]))
    return 0


COMMANDS = {
    "verify-expansion": cmd_verify_expansion,
    "sweep": cmd_sweep,
    "train": cmd_train,
    "gc": cmd_gc,
    "embed": cmd_embed,
    "paths": cmd_paths,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"resx: error: {exc}", file=sys.stderr)
        return 2
    except (SizeGuardError, CheckpointError) as exc:
        print(f"resx: error: {exc}", file=sys.stderr)
        return 2 if isinstance(exc, SizeGuardError) else 1
    except IdxFormatError as exc:
        print(f"resx: IDX error: {exc}", file=sys.stderr)
        return 1
    except (NonFiniteError, ValueError, OSError) as exc:
        print(f"resx: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
