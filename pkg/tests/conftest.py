import numpy as np
import pytest

from resx.model import ModelConfig, init
from resx.tensor import Rng


def central_diff(f, x, h=1e-5):
    """Column-by-column central-difference Jacobian of ``f`` at ``x``."""
    x = np.asarray(x, dtype=np.float64)
    cols = []
    for k in range(x.size):
        e = np.zeros_like(x)
        e.flat[k] = h
        cols.append((np.asarray(f(x + e)) - np.asarray(f(x - e))) / (2 * h))
    return np.stack(cols, axis=-1)


def make_net(n=4, branch="mlp", activation="tanh", lam=0.1, seed=0, d_in=5, d_e=6, d_h=7, d_out=3):
    config = ModelConfig(d_in, d_e, d_h, d_out, n, lam, branch, activation)
    return init(config, Rng(seed)), config


@pytest.fixture
def rng():
    return Rng(1234)


ACCEPTANCE_LINES = []


def record_criterion(number, title, ok, detail):
    line = f"[{'PASS' if ok else 'FAIL'}] criterion {number:>2}: {title} -- {detail}"
    ACCEPTANCE_LINES.append((number, line))
    print(line)
    return ok


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
