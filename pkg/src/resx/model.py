"""Lambda-scaled residual network: affine encoder, n blocks z -> z + lam * F_i(z), affine decoder."""

from __future__ import annotations

import hashlib
import math
import struct
from dataclasses import dataclass, field, replace

import numpy as np

from resx.autodiff import Activation, DiffGraph, NonFiniteError, forward as graph_forward
from resx.tensor import DimensionError, Rng

BRANCH_KINDS = ("linear", "mlp")
MAGIC = b"RESX1"


@dataclass(frozen=True)
class ModelConfig:
    d_in: int
    d_e: int
    d_h: int
    d_out: int
    n: int
    lam: float
    branch_kind: str = "mlp"
    activation: Activation = Activation.RELU

    def __post_init__(self):
        for name in ("d_in", "d_e", "d_h", "d_out"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.n < 0:
            raise ValueError("n must be >= 0")
        if not self.lam >= 0 or not math.isfinite(self.lam):
            raise ValueError("lambda must be a finite non-negative number")
        if self.branch_kind not in BRANCH_KINDS:
            raise ValueError(f"branch_kind must be one of {BRANCH_KINDS}")
        object.__setattr__(self, "activation", Activation(self.activation))

    def branch_shapes(self) -> dict[str, tuple[int, ...]]:
        if self.branch_kind == "linear":
            return {"A": (self.d_e, self.d_e)}
        return {
            "W1": (self.d_h, self.d_e),
            "b1": (self.d_h,),
            "W2": (self.d_e, self.d_h),
            "b2": (self.d_e,),
        }


@dataclass
class ResidualNetParams:
    enc_W: np.ndarray
    enc_b: np.ndarray
    dec_W: np.ndarray
    dec_b: np.ndarray
    branches: list[dict[str, np.ndarray]] = field(default_factory=list)

    def copy(self) -> ResidualNetParams:
        return ResidualNetParams(
            self.enc_W.copy(), self.enc_b.copy(), self.dec_W.copy(), self.dec_b.copy(),
            [{k: v.copy() for k, v in br.items()} for br in self.branches],
        )

    def tensors(self) -> list[tuple[str, np.ndarray]]:
        """All tensors in declaration order, with the flat names used by the network graph."""
        out = [("enc.W", self.enc_W), ("enc.b", self.enc_b), ("dec.W", self.dec_W), ("dec.b", self.dec_b)]
        for i, br in enumerate(self.branches, start=1):
            out.extend((f"blk{i}.{k}", v) for k, v in br.items())
        return out

    def flat(self) -> dict[str, np.ndarray]:
        return dict(self.tensors())

    @classmethod
    def from_flat(cls, flat: dict[str, np.ndarray], config: ModelConfig) -> ResidualNetParams:
        keys = list(config.branch_shapes())
        branches = [{k: flat[f"blk{i}.{k}"] for k in keys} for i in range(1, config.n + 1)]
        return cls(flat["enc.W"], flat["enc.b"], flat["dec.W"], flat["dec.b"], branches)

    def validate(self, config: ModelConfig) -> None:
        expected = {"enc.W": (config.d_e, config.d_in), "enc.b": (config.d_e,),
                    "dec.W": (config.d_out, config.d_e), "dec.b": (config.d_out,)}
        if len(self.branches) != config.n:
            raise DimensionError(f"expected {config.n} branches, got {len(self.branches)}")
        for i in range(1, config.n + 1):
            for k, shape in config.branch_shapes().items():
                expected[f"blk{i}.{k}"] = shape
        got = {k: v.shape for k, v in self.tensors()}
        if got != expected:
            raise DimensionError(f"parameter shapes {got} do not match config {expected}")


def init(config: ModelConfig, rng: Rng) -> ResidualNetParams:
    """He-style init: weights ~ N(0, 2 / fan_in), biases zero.

    Each tensor group draws from its own split stream, so block ``i`` gets the
    same weights whatever the total depth.
    """

    def he(stream: Rng, shape):
        return stream.normal(shape, math.sqrt(2.0 / shape[1]))

    enc_rng, dec_rng = rng.split(0), rng.split(1)
    branches = []
    for i in range(config.n):
        stream = rng.split(2 + i)
        br = {}
        for k, shape in config.branch_shapes().items():
            br[k] = np.zeros(shape) if len(shape) == 1 else he(stream, shape)
        branches.append(br)
    return ResidualNetParams(
        he(enc_rng, (config.d_e, config.d_in)), np.zeros(config.d_e),
        he(dec_rng, (config.d_out, config.d_e)), np.zeros(config.d_out),
        branches,
    )


def _add_branch(g: DiffGraph, z: int, config: ModelConfig, prefix: str, block: int | None) -> int:
    if config.branch_kind == "linear":
        return g.affine(z, prefix + "A", (config.d_e, config.d_e), block=block)
    h = g.affine(z, prefix + "W1", (config.d_h, config.d_e), prefix + "b1", block=block)
    h = g.activation(h, config.activation, block=block)
    return g.affine(h, prefix + "W2", (config.d_e, config.d_h), prefix + "b2", block=block)


def branch_graph(config: ModelConfig) -> DiffGraph:
    """Graph of a single residual branch F: R^d_e -> R^d_e, params named without prefix."""
    g = DiffGraph(config.d_e)
    _add_branch(g, 0, config, "", None)
    return g


def network_graph(config: ModelConfig) -> DiffGraph:
    """Graph of the whole network, with parameters named as in ``ResidualNetParams.flat``."""
    g = DiffGraph(config.d_in)
    z = g.affine(0, "enc.W", (config.d_e, config.d_in), "enc.b", block=0)
    for i in range(1, config.n + 1):
        f = _add_branch(g, z, config, f"blk{i}.", i)
        z = g.add(z, g.scale(f, config.lam, block=i), block=i)
    g.affine(z, "dec.W", (config.d_out, config.d_e), "dec.b", block=config.n + 1)
    return g


def encode(params: ResidualNetParams, x):
    return np.asarray(x, dtype=np.float64) @ params.enc_W.T + params.enc_b


def decode(params: ResidualNetParams, z):
    return z @ params.dec_W.T + params.dec_b


def branch_forward(params: ResidualNetParams, config: ModelConfig, i: int, z, graph: DiffGraph | None = None):
    """F_i(z) for the 1-based block index ``i``."""
    g = graph if graph is not None else branch_graph(config)
    try:
        out, _ = graph_forward(g, params.branches[i - 1], z)
    except NonFiniteError as exc:
        raise NonFiniteError(i, exc.node) from None
    return out


def residual_tower(params: ResidualNetParams, config: ModelConfig, z):
    """Apply the n residual blocks to ``z``.

    Returns ``(R(z), norms)`` where ``norms[k]`` is the 2-norm of the state
    after block ``k + 1`` (per row for batched input).
    """
    z = np.asarray(z, dtype=np.float64)
    if z.shape[-1] != config.d_e:
        raise DimensionError(f"tower input width {z.shape[-1]} != d_e {config.d_e}")
    g = branch_graph(config)
    norms = []
    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(1, config.n + 1):
            z = z + config.lam * branch_forward(params, config, i, z, g)
            if not np.all(np.isfinite(z)):
                raise NonFiniteError(i, None)
            norms.append(np.linalg.norm(z, axis=-1))
    return z, norms


def forward(params: ResidualNetParams, config: ModelConfig, x):
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1] != config.d_in:
        raise DimensionError(f"input width {x.shape[-1]} != d_in {config.d_in}")
    z, _ = residual_tower(params, config, encode(params, x))
    with np.errstate(over="ignore", invalid="ignore"):
        out = decode(params, z)
    if not np.all(np.isfinite(out)):
        raise NonFiniteError(config.n + 1, None)
    return out


def base_affine(params: ResidualNetParams):
    """(W_0, b_0) of the base model M_0 = D o E."""
    return params.dec_W @ params.enc_W, params.dec_W @ params.enc_b + params.dec_b


def zero_pad_depth(params: ResidualNetParams, config: ModelConfig, extra: int):
    """Append ``extra`` all-zero branches; the padded network computes the same function."""
    if extra <= 0:
        raise ValueError("extra must be positive")
    new = params.copy()
    for _ in range(extra):
        new.branches.append({k: np.zeros(s) for k, s in config.branch_shapes().items()})
    return new, replace(config, n=config.n + extra)


# Checkpoint container: b"RESX1", then d_in, d_e, d_h, d_out, n (int64),
# lambda (float64), branch_kind, activation (int64 codes), then every tensor
# in declaration order as raw little-endian float64.
_ACTIVATIONS = list(Activation)


class CheckpointError(ValueError):
    pass


def to_bytes(params: ResidualNetParams, config: ModelConfig) -> bytes:
    params.validate(config)
    header = MAGIC + struct.pack(
        "<5qd2q", config.d_in, config.d_e, config.d_h, config.d_out, config.n, config.lam,
        BRANCH_KINDS.index(config.branch_kind), _ACTIVATIONS.index(config.activation),
    )
    body = b"".join(np.ascontiguousarray(t, dtype="<f8").tobytes() for _, t in params.tensors())
    return header + body


def from_bytes(blob: bytes) -> tuple[ResidualNetParams, ModelConfig]:
    if blob[:5] != MAGIC:
        raise CheckpointError("bad magic at byte offset 0")
    size = struct.calcsize("<5qd2q")
    if len(blob) < 5 + size:
        raise CheckpointError(f"truncated header at byte offset {len(blob)}")
    d_in, d_e, d_h, d_out, n, lam, kind, act = struct.unpack_from("<5qd2q", blob, 5)
    try:
        config = ModelConfig(d_in, d_e, d_h, d_out, n, lam, BRANCH_KINDS[kind], _ACTIVATIONS[act])
    except (IndexError, ValueError) as exc:
        raise CheckpointError(f"invalid header: {exc}") from None
    shapes = [("enc.W", (d_e, d_in)), ("enc.b", (d_e,)), ("dec.W", (d_out, d_e)), ("dec.b", (d_out,))]
    for i in range(1, n + 1):
        shapes.extend((f"blk{i}.{k}", s) for k, s in config.branch_shapes().items())
    offset = 5 + size
    flat = {}
    for name, shape in shapes:
        count = math.prod(shape)
        if offset + 8 * count > len(blob):
            raise CheckpointError(f"truncated tensor {name} at byte offset {offset}")
        flat[name] = np.frombuffer(blob, dtype="<f8", count=count, offset=offset).astype(np.float64).reshape(shape)
        offset += 8 * count
    if offset != len(blob):
        raise CheckpointError(f"trailing bytes at byte offset {offset}")
    return ResidualNetParams.from_flat(flat, config), config


def save_checkpoint(path, params: ResidualNetParams, config: ModelConfig) -> None:
    with open(path, "wb") as fh:
        fh.write(to_bytes(params, config))


def load_checkpoint(path) -> tuple[ResidualNetParams, ModelConfig]:
    with open(path, "rb") as fh:
        return from_bytes(fh.read())


def content_hash(blob: bytes) -> str:
    """Git blob object id (sha1 over ``b"blob <len>\\0" + blob``)."""
    return hashlib.sha1(b"blob %d\0" % len(blob) + blob).hexdigest()
