"""Matplotlib renderings of sweep results, written next to the CSV/SVG outputs."""

from __future__ import annotations

import matplotlib

matplotlib.use("Agg")
import matplotlib.pyplot as plt  # noqa: E402


def _style(ax, xlabel, ylabel, logx=False, logy=False):
    ax.set_xlabel(xlabel)
    ax.set_ylabel(ylabel)
    if logx:
        ax.set_xscale("log")
    if logy:
        ax.set_yscale("log")
    ax.grid(True, alpha=0.3)


def _finite(xs, ys):
    pts = [(x, y) for x, y in zip(xs, ys) if x is not None and y is not None]
    return [p[0] for p in pts], [p[1] for p in pts]


def save_lines(path, series: dict, title="", xlabel="", ylabel="", logx=False, logy=False):
    fig, ax = plt.subplots(figsize=(6.4, 4.0))
    for name, (xs, ys) in series.items():
        ax.plot(*_finite(xs, ys), marker="o", markersize=3, label=str(name))
    _style(ax, xlabel, ylabel, logx, logy)
    ax.set_title(title)
    ax.legend(fontsize=8)
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)


def save_capacity(path, lambdas, mean_acc, mean_gc, n):
    """Two panels: max test accuracy and GC at that step, against lambda (lambda = 0 drawn at the left edge)."""
    positive = [l for l in lambdas if l > 0]
    floor = min(positive) / 4 if positive else 1.0
    xs = [l if l > 0 else floor for l in lambdas]
    fig, (left, right) = plt.subplots(1, 2, figsize=(10, 4))
    left.plot(*_finite(xs, mean_acc), marker="o")
    _style(left, "lambda", "max test accuracy", logx=True)
    right.plot(*_finite(xs, mean_gc), marker="o", color="tab:red")
    _style(right, "lambda", "GC at max test accuracy", logx=True)
    fig.suptitle(f"capacity sweep, n = {n} (lambda = 0 plotted at {floor:.2g})")
    fig.tight_layout()
    fig.savefig(path, dpi=120)
    plt.close(fig)
