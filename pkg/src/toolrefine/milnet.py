"""Proposal-set classifier: shared MLP encoder, pre-norm transformer encoder
stack with self-attention across the proposals of one image, and a
per-proposal sigmoid head.

Forward and backward passes are written out by hand in float64 numpy.  A
bag is an ``N x D`` feature matrix; there is no positional encoding and no
masking, so the network is permutation-equivariant over proposals.
"""

from __future__ import annotations

import json
import struct
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

CHECKPOINT_MAGIC = b"TRFCKPT\x00"
CHECKPOINT_VERSION = 1
LN_EPS = 1e-5
_GELU_C = np.sqrt(2.0 / np.pi)


class ConfigError(ValueError):
    pass


class CheckpointError(ValueError):
    pass


class EmptyBagError(ValueError):
    pass


@dataclass(frozen=True)
class NetworkConfig:
    feature_dim: int
    num_classes: int
    model_dim: int = 64
    num_heads: int = 4
    num_layers: int = 5
    mlp_hidden_dim: int = 64
    ff_hidden_dim: int = 128
    seed: int = 0

    def __post_init__(self):
        for f in fields(self):
            if f.name != "seed" and getattr(self, f.name) < 1:
                raise ConfigError(f"{f.name} must be positive, got {getattr(self, f.name)}")
        if self.model_dim % self.num_heads:
            raise ConfigError(
                f"model_dim={self.model_dim} is not divisible by num_heads={self.num_heads}"
            )

    @property
    def head_dim(self) -> int:
        return self.model_dim // self.num_heads


def parameter_shapes(config: NetworkConfig) -> dict[str, tuple[int, ...]]:
    """Name -> shape for every trainable tensor, in canonical order."""
    D, d, C = config.feature_dim, config.model_dim, config.num_classes
    m, f = config.mlp_hidden_dim, config.ff_hidden_dim
    shapes: dict[str, tuple[int, ...]] = {
        "enc.w1": (D, m),
        "enc.b1": (m,),
        "enc.w2": (m, d),
        "enc.b2": (d,),
    }
    for layer in range(config.num_layers):
        p = f"layer{layer}."
        shapes.update({
            p + "ln1.g": (d,), p + "ln1.b": (d,),
            p + "wq": (d, d), p + "bq": (d,),
            p + "wk": (d, d), p + "bk": (d,),
            p + "wv": (d, d), p + "bv": (d,),
            p + "wo": (d, d), p + "bo": (d,),
            p + "ln2.g": (d,), p + "ln2.b": (d,),
            p + "ff.w1": (d, f), p + "ff.b1": (f,),
            p + "ff.w2": (f, d), p + "ff.b2": (d,),
        })
    shapes["head.w"] = (d, C)
    shapes["head.b"] = (C,)
    return shapes


class RefinementModel:
    """Parameters plus matching gradient buffers."""

    def __init__(self, config: NetworkConfig, params: dict[str, np.ndarray]):
        shapes = parameter_shapes(config)
        if set(params) != set(shapes):
            missing = sorted(set(shapes) - set(params))
            extra = sorted(set(params) - set(shapes))
            raise CheckpointError(f"parameter set mismatch: missing={missing} extra={extra}")
        for name, shape in shapes.items():
            if params[name].shape != shape:
                raise CheckpointError(
                    f"parameter {name} has shape {params[name].shape}, expected {shape}"
                )
        self.config = config
        self.params = {name: np.asarray(params[name], dtype=np.float64) for name in shapes}
        self.grads = {name: np.zeros(shape) for name, shape in shapes.items()}

    def zero_grad(self) -> None:
        for g in self.grads.values():
            g.fill(0.0)

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def all_finite(self) -> bool:
        return all(np.isfinite(p).all() for p in self.params.values())

    def copy(self) -> "RefinementModel":
        return RefinementModel(self.config, {k: v.copy() for k, v in self.params.items()})

    def forward(self, bag: np.ndarray) -> "BagActivations":
        return forward(self, bag)

    def backward(self, activations: "BagActivations", upstream_grad: np.ndarray) -> None:
        backward(self, activations, upstream_grad)


def init_model(config: NetworkConfig, residual_scale: float | None = None) -> RefinementModel:
    """Fan-in scaled uniform weights, zero biases, unit layer-norm gains.

    Projections that write into the residual stream (``wo``, ``ff.w2``) are
    further scaled by ``residual_scale``, default ``1/sqrt(2 L)``.
    """
    if residual_scale is None:
        residual_scale = 1.0 / np.sqrt(2 * config.num_layers)
    rng = np.random.default_rng(config.seed)
    params = {}
    for name, shape in parameter_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if leaf == "g":
            params[name] = np.ones(shape)
        elif len(shape) == 2:
            bound = 1.0 / np.sqrt(shape[0])
            if name.endswith((".wo", ".ff.w2")):
                bound *= residual_scale
            params[name] = rng.uniform(-bound, bound, size=shape)
        else:
            params[name] = np.zeros(shape)
    return RefinementModel(config, params)


# ---------------------------------------------------------------------------
# primitives


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x, dtype=np.float64)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def _gelu(x):
    t = np.tanh(_GELU_C * (x + 0.044715 * x**3))
    return 0.5 * x * (1.0 + t), t


def _gelu_grad(x, t):
    dinner = _GELU_C * (1.0 + 3 * 0.044715 * x**2)
    return 0.5 * (1.0 + t) + 0.5 * x * (1.0 - t**2) * dinner


def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    inv = 1.0 / np.sqrt((xc**2).mean(axis=-1, keepdims=True) + LN_EPS)
    xhat = xc * inv
    return xhat * g + b, (xhat, inv)


def _layernorm_backward(dy, g, cache):
    xhat, inv = cache
    dg = (dy * xhat).sum(axis=0)
    db = dy.sum(axis=0)
    dxhat = dy * g
    dx = inv * (
        dxhat
        - dxhat.mean(axis=-1, keepdims=True)
        - xhat * (dxhat * xhat).mean(axis=-1, keepdims=True)
    )
    return dx, dg, db


def _split_heads(x, h):
    n, d = x.shape
    return x.reshape(n, h, d // h).transpose(1, 0, 2)


def _merge_heads(x):
    h, n, dk = x.shape
    return x.transpose(1, 0, 2).reshape(n, h * dk)


def _softmax(scores):
    z = scores - scores.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# ---------------------------------------------------------------------------
# forward / backward


@dataclass
class BagActivations:
    logits: np.ndarray  # N x C
    probs: np.ndarray  # N x C
    cache: dict

    @property
    def num_instances(self) -> int:
        return self.logits.shape[0]


def forward(model: RefinementModel, bag: np.ndarray) -> BagActivations:
    cfg, P = model.config, model.params
    X = np.asarray(bag, dtype=np.float64)
    if X.ndim != 2 or X.shape[0] == 0:
        raise EmptyBagError("forward needs a non-empty N x D bag")
    if X.shape[1] != cfg.feature_dim:
        raise ValueError(f"bag has feature dim {X.shape[1]}, model expects {cfg.feature_dim}")
    if not np.isfinite(X).all():
        raise ValueError("bag contains non-finite features")

    cache: dict = {"x": X}
    u1 = X @ P["enc.w1"] + P["enc.b1"]
    a1, t1 = _gelu(u1)
    h = a1 @ P["enc.w2"] + P["enc.b2"]
    cache["enc"] = (u1, t1, a1)

    nh = cfg.num_heads
    scale = 1.0 / np.sqrt(cfg.head_dim)
    layers = []
    for layer in range(cfg.num_layers):
        p = f"layer{layer}."
        a, ln1 = _layernorm(h, P[p + "ln1.g"], P[p + "ln1.b"])
        q = _split_heads(a @ P[p + "wq"] + P[p + "bq"], nh)
        k = _split_heads(a @ P[p + "wk"] + P[p + "bk"], nh)
        v = _split_heads(a @ P[p + "wv"] + P[p + "bv"], nh)
        attn = _softmax(q @ k.transpose(0, 2, 1) * scale)
        ctx = _merge_heads(attn @ v)
        h = h + ctx @ P[p + "wo"] + P[p + "bo"]

        a2, ln2 = _layernorm(h, P[p + "ln2.g"], P[p + "ln2.b"])
        uf = a2 @ P[p + "ff.w1"] + P[p + "ff.b1"]
        zf, tf = _gelu(uf)
        h = h + zf @ P[p + "ff.w2"] + P[p + "ff.b2"]
        layers.append((a, ln1, q, k, v, attn, ctx, a2, ln2, uf, tf, zf))
    cache["layers"] = layers
    cache["h"] = h

    logits = h @ P["head.w"] + P["head.b"]
    return BagActivations(logits=logits, probs=sigmoid(logits), cache=cache)


def backward(model: RefinementModel, activations: BagActivations, upstream_grad) -> None:
    """Accumulate d(loss)/d(theta) into ``model.grads``.

    ``upstream_grad`` is d(loss)/d(instance probabilities), shape N x C.
    """
    dprobs = np.asarray(upstream_grad, dtype=np.float64)
    if dprobs.shape != activations.probs.shape:
        raise ValueError(
            f"upstream_grad has shape {dprobs.shape}, expected {activations.probs.shape}"
        )
    cfg, P, G = model.config, model.params, model.grads
    cache = activations.cache
    probs = activations.probs
    dlogits = dprobs * probs * (1.0 - probs)

    h = cache["h"]
    G["head.w"] += h.T @ dlogits
    G["head.b"] += dlogits.sum(axis=0)
    dh = dlogits @ P["head.w"].T

    scale = 1.0 / np.sqrt(cfg.head_dim)
    for layer in reversed(range(cfg.num_layers)):
        p = f"layer{layer}."
        a, ln1, q, k, v, attn, ctx, a2, ln2, uf, tf, zf = cache["layers"][layer]

        # feed-forward block: h_out = h_mid + gelu(LN(h_mid) W1 + b1) W2 + b2
        G[p + "ff.w2"] += zf.T @ dh
        G[p + "ff.b2"] += dh.sum(axis=0)
        duf = (dh @ P[p + "ff.w2"].T) * _gelu_grad(uf, tf)
        G[p + "ff.w1"] += a2.T @ duf
        G[p + "ff.b1"] += duf.sum(axis=0)
        dx, dg, db = _layernorm_backward(duf @ P[p + "ff.w1"].T, P[p + "ln2.g"], ln2)
        G[p + "ln2.g"] += dg
        G[p + "ln2.b"] += db
        dh = dh + dx

        # attention block: h_mid = h_in + attn(LN(h_in)) Wo + bo
        G[p + "wo"] += ctx.T @ dh
        G[p + "bo"] += dh.sum(axis=0)
        dctx = _split_heads(dh @ P[p + "wo"].T, cfg.num_heads)
        dattn = dctx @ v.transpose(0, 2, 1)
        dv = attn.transpose(0, 2, 1) @ dctx
        dscores = attn * (dattn - (dattn * attn).sum(axis=-1, keepdims=True)) * scale
        dq = dscores @ k
        dk = dscores.transpose(0, 2, 1) @ q
        da = np.zeros_like(a)
        for name, dproj in (("q", dq), ("k", dk), ("v", dv)):
            dproj = _merge_heads(dproj)
            G[p + "w" + name] += a.T @ dproj
            G[p + "b" + name] += dproj.sum(axis=0)
            da += dproj @ P[p + "w" + name].T
        dx, dg, db = _layernorm_backward(da, P[p + "ln1.g"], ln1)
        G[p + "ln1.g"] += dg
        G[p + "ln1.b"] += db
        dh = dh + dx

    u1, t1, a1 = cache["enc"]
    G["enc.w2"] += a1.T @ dh
    G["enc.b2"] += dh.sum(axis=0)
    du1 = (dh @ P["enc.w2"].T) * _gelu_grad(u1, t1)
    G["enc.w1"] += cache["x"].T @ du1
    G["enc.b1"] += du1.sum(axis=0)


# ---------------------------------------------------------------------------
# checkpoints
#
# layout: magic (8 bytes) | header length (u64 LE) | JSON header | float64 LE data


def save_checkpoint(model: RefinementModel, path) -> None:
    directory = []
    offset = 0
    for name, arr in model.params.items():
        directory.append({"name": name, "shape": list(arr.shape), "offset": offset})
        offset += arr.size * 8
    header = {
        "format_version": CHECKPOINT_VERSION,
        "config": asdict(model.config),
        "tensors": directory,
    }
    blob = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(blob)))
        fh.write(blob)
        for arr in model.params.values():
            fh.write(np.ascontiguousarray(arr, dtype="<f8").tobytes())


def load_checkpoint(path, expected: NetworkConfig | dict | None = None) -> RefinementModel:
    """Read a checkpoint; if ``expected`` is given, every config field it
    specifies (other than the seed) must agree with the stored one."""
    raw = Path(path).read_bytes()
    if raw[:8] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    (hlen,) = struct.unpack("<Q", raw[8:16])
    header = json.loads(raw[16 : 16 + hlen].decode("utf-8"))
    if header.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format_version {header.get('format_version')}, expected {CHECKPOINT_VERSION}"
        )
    config = NetworkConfig(**header["config"])
    if expected is not None:
        want = asdict(expected) if isinstance(expected, NetworkConfig) else dict(expected)
        for key, value in want.items():
            if key == "seed":
                continue
            if header["config"].get(key) != value:
                raise CheckpointError(
                    f"{path}: {key} mismatch (checkpoint has {header['config'].get(key)}, expected {value})"
                )
    shapes = parameter_shapes(config)
    data = memoryview(raw)[16 + hlen :]
    params = {}
    for entry in header["tensors"]:
        name, shape = entry["name"], tuple(entry["shape"])
        if shapes.get(name) != shape:
            raise CheckpointError(f"{path}: tensor {name} has shape {shape}, config implies {shapes.get(name)}")
        count = int(np.prod(shape))
        start = entry["offset"]
        if start + 8 * count > len(data):
            raise CheckpointError(f"{path}: tensor {name} runs past end of file")
        params[name] = np.frombuffer(data[start : start + 8 * count], dtype="<f8").reshape(shape).copy()
    return RefinementModel(config, params)
