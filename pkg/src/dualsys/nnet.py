"""Small dense-network engine: MLP forward/backward, Adam, gradient checks, checkpoints.

Arrays are float32 by default. Everything here is dtype-preserving, so the
gradient checker can run the same code paths in float64.
"""
from __future__ import annotations

import hashlib
import io
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .errors import FormatError, NumericError, ShapeError

ACTIVATIONS = ("identity", "relu", "silu", "tanh")
_ACT_TAG = {name: i for i, name in enumerate(ACTIVATIONS)}

PARAM_MAGIC = b"HUMEPARM"
PARAM_VERSION = 1


def _sigmoid(z):
    return 0.5 * (1.0 + np.tanh(0.5 * z))


def _act(name, z):
    if name == "identity":
        return z
    if name == "relu":
        return np.maximum(z, 0)
    if name == "silu":
        return z * _sigmoid(z)
    if name == "tanh":
        return np.tanh(z)
    raise ValueError(f"unknown activation {name!r}")


def _act_grad(name, z, a):
    if name == "identity":
        return np.ones_like(z)
    if name == "relu":
        return (z > 0).astype(z.dtype)
    if name == "silu":
        s = _sigmoid(z)
        return s * (1 + z * (1 - s))
    if name == "tanh":
        return 1 - a * a
    raise ValueError(f"unknown activation {name!r}")


@dataclass
class MlpParams:
    weights: list[np.ndarray]  # each (out, in)
    biases: list[np.ndarray]  # each (out,)
    activations: list[str]

    def __post_init__(self):
        if not (len(self.weights) == len(self.biases) == len(self.activations)):
            raise ShapeError("weights, biases and activations must have equal length")
        for k, (w, b, act) in enumerate(zip(self.weights, self.biases, self.activations)):
            if act not in _ACT_TAG:
                raise ValueError(f"unknown activation {act!r} in layer {k}")
            if w.ndim != 2 or b.shape != (w.shape[0],):
                raise ShapeError(f"layer {k}: weight {w.shape} and bias {b.shape} disagree")
            if k and w.shape[1] != self.weights[k - 1].shape[0]:
                raise ShapeError(
                    f"layer {k} expects {w.shape[1]} inputs, previous layer emits "
                    f"{self.weights[k - 1].shape[0]}"
                )

    @property
    def in_dim(self) -> int:
        return self.weights[0].shape[1]

    @property
    def out_dim(self) -> int:
        return self.weights[-1].shape[0]

    def copy(self) -> "MlpParams":
        return MlpParams([w.copy() for w in self.weights], [b.copy() for b in self.biases],
                         list(self.activations))

    def astype(self, dtype) -> "MlpParams":
        return MlpParams([w.astype(dtype) for w in self.weights],
                         [b.astype(dtype) for b in self.biases], list(self.activations))

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def num_params(self) -> int:
        return sum(t.size for t in self.tensors())

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(t)) for t in self.tensors())


@dataclass
class AdamState:
    m: list[np.ndarray]
    v: list[np.ndarray]
    step: int = 0

    @classmethod
    def zeros_like(cls, params: MlpParams) -> "AdamState":
        ts = params.tensors()
        return cls([np.zeros_like(t) for t in ts], [np.zeros_like(t) for t in ts], 0)


@dataclass(frozen=True)
class AdamHyper:
    lr: float = 3e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8


@dataclass
class MlpGrads:
    weights: list[np.ndarray]
    biases: list[np.ndarray]

    def tensors(self) -> list[np.ndarray]:
        out = []
        for w, b in zip(self.weights, self.biases):
            out += [w, b]
        return out

    def __add__(self, other: "MlpGrads") -> "MlpGrads":
        return MlpGrads([a + b for a, b in zip(self.weights, other.weights)],
                        [a + b for a, b in zip(self.biases, other.biases)])

    def scale(self, s: float) -> "MlpGrads":
        return MlpGrads([w * s for w in self.weights], [b * s for b in self.biases])


def init_mlp(sizes, rng: np.random.Generator, hidden="silu", out="identity",
             dtype=np.float32) -> MlpParams:
    """Kaiming-uniform fan-in weights, zero biases."""
    sizes = list(sizes)
    if len(sizes) < 2:
        raise ShapeError("need at least input and output size")
    weights, biases, acts = [], [], []
    for k, (fan_in, fan_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        bound = np.sqrt(6.0 / fan_in)
        weights.append(rng.uniform(-bound, bound, size=(fan_out, fan_in)).astype(dtype))
        biases.append(np.zeros(fan_out, dtype=dtype))
        acts.append(out if k == len(sizes) - 2 else hidden)
    return MlpParams(weights, biases, acts)


def _as_batch(params: MlpParams, x):
    x = np.asarray(x)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != params.in_dim:
        raise ShapeError(f"input shape {x.shape} does not match in-dim {params.in_dim}")
    return xb, single


def forward_cache(params: MlpParams, xb: np.ndarray):
    """Batched forward pass returning ``(output, cache)`` for :func:`backward_cache`."""
    a = xb
    pre, post = [], [a]
    for w, b, act in zip(params.weights, params.biases, params.activations):
        z = a @ w.T + b
        a = _act(act, z)
        pre.append(z)
        post.append(a)
    return a, (pre, post)


def backward_cache(params: MlpParams, cache, upstream: np.ndarray):
    pre, post = cache
    n = len(params.weights)
    gw, gb = [None] * n, [None] * n
    g = upstream
    for k in range(n - 1, -1, -1):
        dz = g * _act_grad(params.activations[k], pre[k], post[k + 1])
        gw[k] = dz.T @ post[k]
        gb[k] = dz.sum(axis=0)
        g = dz @ params.weights[k]
    return MlpGrads(gw, gb), g


def mlp_forward(params: MlpParams, x) -> np.ndarray:
    """Evaluate the network on one input vector or a batch of row vectors."""
    xb, single = _as_batch(params, x)
    y, _ = forward_cache(params, xb)
    return y[0] if single else y


def mlp_backward(params: MlpParams, x, upstream):
    """Gradients of ``<upstream, f(x)>`` w.r.t. every parameter and the input.

    Batched inputs sum parameter gradients over rows; the input gradient keeps
    the batch shape.
    """
    xb, single = _as_batch(params, x)
    up = np.asarray(upstream)
    upb = up[None, :] if up.ndim == 1 else up
    if upb.shape != (xb.shape[0], params.out_dim):
        raise ShapeError(f"upstream shape {up.shape} does not match output "
                         f"({xb.shape[0]}, {params.out_dim})")
    _, cache = forward_cache(params, xb)
    grads, gx = backward_cache(params, cache, upb.astype(xb.dtype, copy=False))
    return grads, (gx[0] if single else gx)


def adam_step(params: MlpParams, grads: MlpGrads, state: AdamState,
              hyper: AdamHyper = AdamHyper()):
    """One bias-corrected Adam update. Returns fresh ``(params, state)``."""
    gts = grads.tensors()
    pts = params.tensors()
    if len(gts) != len(pts) or any(g.shape != p.shape for g, p in zip(gts, pts)):
        raise ShapeError("gradient shapes do not match parameters")
    for i, g in enumerate(gts):
        if not np.all(np.isfinite(g)):
            raise NumericError("non-finite gradient", layer=i // 2)
    step = state.step + 1
    c1 = 1.0 - hyper.beta1 ** step
    c2 = 1.0 - hyper.beta2 ** step
    new_p, new_m, new_v = [], [], []
    for p, g, m, v in zip(pts, gts, state.m, state.v):
        m = hyper.beta1 * m + (1 - hyper.beta1) * g
        v = hyper.beta2 * v + (1 - hyper.beta2) * (g * g)
        upd = hyper.lr * (m / c1) / (np.sqrt(v / c2) + hyper.eps)
        new_p.append((p - upd).astype(p.dtype, copy=False))
        new_m.append(m.astype(p.dtype, copy=False))
        new_v.append(v.astype(p.dtype, copy=False))
    out = MlpParams(new_p[0::2], new_p[1::2], list(params.activations))
    return out, AdamState(new_m, new_v, step)


class Adam:
    """Owns a parameter set and its optimizer state for a training loop."""

    def __init__(self, params: MlpParams, hyper: AdamHyper = AdamHyper()):
        self.params = params
        self.state = AdamState.zeros_like(params)
        self.hyper = hyper

    def step(self, grads: MlpGrads) -> MlpParams:
        self.params, self.state = adam_step(self.params, grads, self.state, self.hyper)
        return self.params


def grad_check(net_builder: Callable[[np.random.Generator], tuple], trials: int = 20,
               seed: int = 0, eps: float = 1e-4) -> float:
    """Worst relative error between analytic and central-difference gradients.

    ``net_builder(rng)`` returns ``(params, input)``. Both are promoted to
    float64. The probe loss is ``<u, f(x)>`` for a random ``u``. Relative
    error per entry is ``|a - n| / max(|a|, |n|, 1e-4)``; inputs that put a
    relu pre-activation within ``10 * eps`` of its kink are redrawn.
    """
    if trials < 1:
        raise ValueError("trials must be >= 1")
    rng = np.random.default_rng(seed)
    worst = 0.0
    for _ in range(trials):
        for _attempt in range(50):
            params, x = net_builder(rng)
            params = params.astype(np.float64)
            x = np.asarray(x, dtype=np.float64)
            xb = x[None, :] if x.ndim == 1 else x
            _, (pre, _) = forward_cache(params, xb)
            near_kink = any(
                act == "relu" and np.any(np.abs(z) < 10 * eps)
                for act, z in zip(params.activations, pre)
            )
            if not near_kink:
                break
        u = rng.standard_normal((xb.shape[0], params.out_dim))

        def loss(p, xx):
            return float(np.sum(u * forward_cache(p, xx)[0]))

        grads, gx = mlp_backward(params, xb, u)
        analytic = grads.tensors() + [gx]
        numeric = []
        for t in params.tensors():
            g = np.zeros_like(t)
            it = np.nditer(t, flags=["multi_index"])
            for _v in it:
                idx = it.multi_index
                old = t[idx]
                t[idx] = old + eps
                lp = loss(params, xb)
                t[idx] = old - eps
                lm = loss(params, xb)
                t[idx] = old
                g[idx] = (lp - lm) / (2 * eps)
            numeric.append(g)
        gxn = np.zeros_like(xb)
        for idx in np.ndindex(xb.shape):
            old = xb[idx]
            xb[idx] = old + eps
            lp = loss(params, xb)
            xb[idx] = old - eps
            lm = loss(params, xb)
            xb[idx] = old
            gxn[idx] = (lp - lm) / (2 * eps)
        numeric.append(gxn)
        for a, n in zip(analytic, numeric):
            denom = np.maximum(np.maximum(np.abs(a), np.abs(n)), 1e-4)
            worst = max(worst, float(np.max(np.abs(a - n) / denom)))
    return worst


def random_net_builder(activation: str, depth: int = 3, max_width: int = 6,
                       weight_scale: float = 1.0, batch: int = 2):
    """Net factory for :func:`grad_check`: random widths, given hidden activation."""

    def build(rng):
        sizes = list(rng.integers(2, max_width + 1, size=depth + 1))
        p = init_mlp(sizes, rng, hidden=activation, out="identity", dtype=np.float64)
        p.weights = [w * weight_scale for w in p.weights]
        p.biases = [rng.normal(0, 0.3, size=b.shape) for b in p.biases]
        x = rng.normal(size=(batch, sizes[0]))
        return p, x

    return build


# --- checkpoint file -------------------------------------------------------

def params_to_bytes(params: MlpParams) -> bytes:
    buf = io.BytesIO()
    buf.write(PARAM_MAGIC)
    buf.write(struct.pack("<II", PARAM_VERSION, len(params.weights)))
    for w, b, act in zip(params.weights, params.biases, params.activations):
        out_dim, in_dim = w.shape
        buf.write(struct.pack("<IIB", in_dim, out_dim, _ACT_TAG[act]))
        buf.write(np.ascontiguousarray(w, dtype="<f4").tobytes())
        buf.write(np.ascontiguousarray(b, dtype="<f4").tobytes())
    return buf.getvalue()


def params_from_bytes(data: bytes) -> MlpParams:
    if data[:8] != PARAM_MAGIC:
        raise FormatError("bad parameter-file magic", 0)
    off = 8
    if len(data) < off + 8:
        raise FormatError("truncated header", off)
    version, nlayers = struct.unpack_from("<II", data, off)
    if version != PARAM_VERSION:
        raise FormatError(f"unsupported version {version}", off)
    off += 8
    weights, biases, acts = [], [], []
    for _ in range(nlayers):
        if len(data) < off + 9:
            raise FormatError("truncated layer header", off)
        in_dim, out_dim, tag = struct.unpack_from("<IIB", data, off)
        if tag >= len(ACTIVATIONS):
            raise FormatError(f"unknown activation tag {tag}", off + 8)
        off += 9
        nbytes = 4 * (in_dim * out_dim + out_dim)
        if len(data) < off + nbytes:
            raise FormatError("truncated layer payload", off)
        w = np.frombuffer(data, dtype="<f4", count=in_dim * out_dim, offset=off)
        off += 4 * in_dim * out_dim
        b = np.frombuffer(data, dtype="<f4", count=out_dim, offset=off)
        off += 4 * out_dim
        weights.append(w.reshape(out_dim, in_dim).astype(np.float32))
        biases.append(b.astype(np.float32))
        acts.append(ACTIVATIONS[tag])
    if off != len(data):
        raise FormatError("trailing bytes after last layer", off)
    return MlpParams(weights, biases, acts)


def save_params(params: MlpParams, path) -> None:
    Path(path).write_bytes(params_to_bytes(params))


def load_params(path) -> MlpParams:
    return params_from_bytes(Path(path).read_bytes())


def checksum(params: MlpParams) -> str:
    return hashlib.sha256(params_to_bytes(params)).hexdigest()
