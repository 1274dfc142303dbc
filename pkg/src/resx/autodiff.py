"""A tiny graph of dense primitives with forward-mode and reverse-mode derivatives.

A :class:`DiffGraph` is an ordered list of nodes (input, affine, activation,
add, scale).  Parameters live outside the graph in a ``dict`` keyed by name,
so one graph serves every parameter set of the same architecture.

Shapes: a single input is a vector ``(d,)``; a batch is ``(B, d)``.  Tangents
for :func:`jvp` may carry one extra axis, ``(k, d)`` for a single point or
``(B, k, d)`` for a batch, which pushes ``k`` directions through at once.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from resx.tensor import DimensionError


class Activation(str, Enum):
    RELU = "relu"
    TANH = "tanh"
    IDENTITY = "identity"

    def apply(self, x):
        if self is Activation.RELU:
            return np.maximum(x, 0.0)
        if self is Activation.TANH:
            return np.tanh(x)
        return x

    def derivative(self, x, y):
        """Derivative given pre-activation ``x`` and output ``y``; relu'(0) = 0."""
        if self is Activation.RELU:
            return (x > 0).astype(np.float64)
        if self is Activation.TANH:
            return 1.0 - y * y
        return np.ones_like(x)


class NonFiniteError(OverflowError):
    """A node produced inf/nan.  ``block`` is the residual block index, if any."""

    def __init__(self, block, node, where="forward"):
        self.block = block
        self.node = node
        msg = f"non-finite value in {where} at node {node}"
        if block is not None:
            msg += f" (block {block})"
        super().__init__(msg)


@dataclass(frozen=True)
class Node:
    op: str
    parents: tuple[int, ...] = ()
    weight: str | None = None
    bias: str | None = None
    activation: Activation | None = None
    factor: float = 1.0
    block: int | None = None


@dataclass
class DiffGraph:
    d_in: int
    nodes: list[Node] = field(default_factory=list)
    widths: list[int] = field(default_factory=list)

    def __post_init__(self):
        if not self.nodes:
            self.nodes.append(Node("input"))
            self.widths.append(self.d_in)

    @property
    def d_out(self) -> int:
        return self.widths[-1]

    def _push(self, node: Node, width: int) -> int:
        for p in node.parents:
            if not 0 <= p < len(self.nodes):
                raise ValueError(f"parent {p} does not exist")
        self.nodes.append(node)
        self.widths.append(width)
        return len(self.nodes) - 1

    def affine(self, parent: int, weight: str, shape: tuple[int, int], bias: str | None = None,
               block: int | None = None) -> int:
        if shape[1] != self.widths[parent]:
            raise DimensionError(f"weight {weight} expects width {shape[1]}, parent has {self.widths[parent]}")
        return self._push(Node("affine", (parent,), weight=weight, bias=bias, block=block), shape[0])

    def activation(self, parent: int, kind: Activation, block: int | None = None) -> int:
        return self._push(Node("act", (parent,), activation=Activation(kind), block=block), self.widths[parent])

    def add(self, a: int, b: int, block: int | None = None) -> int:
        if self.widths[a] != self.widths[b]:
            raise DimensionError("add operands differ in width")
        return self._push(Node("add", (a, b), block=block), self.widths[a])

    def scale(self, parent: int, factor: float, block: int | None = None) -> int:
        return self._push(Node("scale", (parent,), factor=float(factor), block=block), self.widths[parent])


def _as_batch(graph: DiffGraph, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x, single = x[None, :], True
    elif x.ndim == 2:
        single = False
    else:
        raise DimensionError(f"input must be rank 1 or 2, got {x.shape}")
    if x.shape[1] != graph.d_in:
        raise DimensionError(f"input width {x.shape[1]} != graph input width {graph.d_in}")
    return x, single


def _check(value, node: Node, idx: int, where="forward"):
    if not np.all(np.isfinite(value)):
        raise NonFiniteError(node.block, idx, where)


def _run(graph: DiffGraph, params: dict, x):
    values = [x]
    with np.errstate(over="ignore", invalid="ignore"):
        for idx, node in enumerate(graph.nodes[1:], start=1):
            if node.op == "affine":
                v = values[node.parents[0]] @ params[node.weight].T
                if node.bias is not None:
                    v = v + params[node.bias]
            elif node.op == "act":
                v = node.activation.apply(values[node.parents[0]])
            elif node.op == "add":
                v = values[node.parents[0]] + values[node.parents[1]]
            elif node.op == "scale":
                v = node.factor * values[node.parents[0]]
            else:
                raise ValueError(f"unknown op {node.op}")
            _check(v, node, idx)
            values.append(v)
    return values


def forward(graph: DiffGraph, params: dict, x):
    """Evaluate the graph.  Returns ``(output, cache)``; the cache holds every node value."""
    xb, single = _as_batch(graph, x)
    values = _run(graph, params, xb)
    out = values[-1][0] if single else values[-1]
    return out, values


def vjp(graph: DiffGraph, params: dict, x, cotangent, cache=None):
    """Reverse-mode pass.  Returns ``(param_grads, input_grad)``.

    Parameter gradients are summed over the batch; parameters the graph never
    touches do not appear in ``param_grads``.
    """
    xb, single = _as_batch(graph, x)
    values = cache if cache is not None else _run(graph, params, xb)
    ct = np.asarray(cotangent, dtype=np.float64)
    if single:
        ct = ct[None, :]
    if ct.shape != values[-1].shape:
        raise DimensionError(f"cotangent shape {ct.shape} != output shape {values[-1].shape}")

    adj: list = [None] * len(graph.nodes)
    adj[-1] = ct
    grads: dict = {}

    def accumulate(i, g):
        adj[i] = g if adj[i] is None else adj[i] + g

    with np.errstate(over="ignore", invalid="ignore"):
        for idx in range(len(graph.nodes) - 1, 0, -1):
            g = adj[idx]
            if g is None:
                continue
            node = graph.nodes[idx]
            if node.op == "affine":
                (p,) = node.parents
                w = params[node.weight]
                gw = g.T @ values[p]
                grads[node.weight] = grads[node.weight] + gw if node.weight in grads else gw
                if node.bias is not None:
                    gb = g.sum(axis=0)
                    grads[node.bias] = grads[node.bias] + gb if node.bias in grads else gb
                accumulate(p, g @ w)
            elif node.op == "act":
                (p,) = node.parents
                accumulate(p, g * node.activation.derivative(values[p], values[idx]))
            elif node.op == "add":
                accumulate(node.parents[0], g)
                accumulate(node.parents[1], g)
            elif node.op == "scale":
                accumulate(node.parents[0], node.factor * g)
            adj[idx] = None
            _check(adj[node.parents[0]], node, idx, "backward")

    gx = adj[0] if adj[0] is not None else np.zeros_like(xb)
    return grads, (gx[0] if single else gx)


def jvp(graph: DiffGraph, params: dict, x, tangent, cache=None):
    """Forward-mode pass: the Jacobian at ``x`` applied to ``tangent``."""
    xb, single = _as_batch(graph, x)
    t = np.asarray(tangent, dtype=np.float64)
    if single:
        t = t[None, ...]
    if t.shape[0] != xb.shape[0] or t.shape[-1] != graph.d_in or t.ndim not in (2, 3):
        raise DimensionError(f"tangent shape {np.shape(tangent)} incompatible with input {np.shape(x)}")
    multi = t.ndim == 3
    values = cache if cache is not None else _run(graph, params, xb)

    tans = [t]
    with np.errstate(over="ignore", invalid="ignore"):
        for idx, node in enumerate(graph.nodes[1:], start=1):
            if node.op == "affine":
                v = tans[node.parents[0]] @ params[node.weight].T
            elif node.op == "act":
                p = node.parents[0]
                d = node.activation.derivative(values[p], values[idx])
                v = tans[p] * (d[:, None, :] if multi else d)
            elif node.op == "add":
                v = tans[node.parents[0]] + tans[node.parents[1]]
            else:
                v = node.factor * tans[node.parents[0]]
            _check(v, node, idx, "jvp")
            tans.append(v)
    out = tans[-1]
    return out[0] if single else out


def jacobian(graph: DiffGraph, params: dict, x):
    """Full input-output Jacobian from one JVP per input basis vector.

    ``x`` of shape ``(d_in,)`` gives ``(d_out, d_in)``; a batch ``(B, d_in)``
    gives ``(B, d_out, d_in)``.
    """
    x = np.asarray(x, dtype=np.float64)
    eye = np.eye(graph.d_in)
    if x.ndim == 1:
        return jvp(graph, params, x, eye).T
    basis = np.broadcast_to(eye, (x.shape[0],) + eye.shape)
    return np.swapaxes(jvp(graph, params, x, basis), 1, 2)
