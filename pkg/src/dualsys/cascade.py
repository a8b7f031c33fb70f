"""Fast refiner: split the selected chunk into sub-chunks and keep denoising each one.

The refiner has its own flow field over ``h``-step chunks, trained with the
same straight-path flow-matching loss as the generator. At run time it
integrates that field over ``omega`` in [0, 1] starting from the partially
denoised sub-chunk instead of fresh noise, conditioned on the observation
taken when the sub-chunk starts executing. To match that starting point the
path's source during training is a partially noised copy of the target,
``tau* A + (1 - tau*) eps`` with ``tau*`` drawn from the candidate range,
rather than pure noise, and the field is told ``tau*`` as one extra input
(each sub-chunk carries its candidate's noise level, so it is known at run time).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import flowhead, nnet
from .errors import ConfigError, NumericError
from .flowhead import ActionChunk


@dataclass
class SubChunk:
    values: np.ndarray  # (h, act_dim)
    noise_level: float
    k: int


@dataclass(frozen=True)
class S1Config:
    h: int = 15
    delta: float = 0.1
    steps: int = 10
    hidden: tuple = (128, 128)
    source_range: tuple = (0.6, 1.0)

    def validate(self, H: int | None = None) -> "S1Config":
        if self.h < 1:
            raise ConfigError("h must be positive")
        if H is not None and H % self.h:
            raise ConfigError(f"sub-horizon h={self.h} does not divide H={H}")
        if abs(self.delta * self.steps - 1.0) > 1e-9:
            raise ConfigError(f"delta * steps = {self.delta * self.steps}, must equal 1")
        lo, hi = self.source_range
        if not 0.0 <= lo <= hi <= 1.0:
            raise ConfigError(f"source_range {self.source_range} must satisfy 0 <= lo <= hi <= 1")
        return self


def segment(chunk: ActionChunk, h: int) -> list[SubChunk]:
    H = chunk.values.shape[0]
    if h < 1 or H % h:
        raise ConfigError(f"sub-horizon h={h} does not divide H={H}")
    return [SubChunk(chunk.values[k * h:(k + 1) * h].copy(), chunk.noise_level, k)
            for k in range(H // h)]


def concatenate(subs: list[SubChunk]) -> ActionChunk:
    subs = sorted(subs, key=lambda s: s.k)
    return ActionChunk(np.concatenate([s.values for s in subs]), subs[0].noise_level)


def refiner_obs(obs, level) -> np.ndarray:
    """Observation features with the sub-chunk's noise level appended as one extra column."""
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float32))
    level = np.asarray(level, dtype=np.float32).reshape(-1)
    n = max(len(obs), len(level))
    obs = np.broadcast_to(obs, (n, obs.shape[1]))
    level = np.broadcast_to(level, (n,))
    return np.concatenate([obs, level[:, None]], axis=1)


def init_refiner(obs_dim: int, h: int, act_dim: int, hidden, rng) -> nnet.MlpParams:
    return flowhead.init_field(obs_dim + 1, h, act_dim, hidden, rng)


def s1_loss_and_grad(params, batch: flowhead.FlowBatch, rng, omega=None, source=None,
                     level=None, source_range=(0.6, 1.0)):
    """Flow-matching loss on h-step sub-chunks.

    Path ``A_w = w A + (1 - w) S`` with target velocity ``A - S``. Unless given,
    the source is ``S = l A + (1 - l) eps`` with ``l ~ U[source_range]`` and
    the field sees ``l`` next to the observation. An explicit ``source`` with
    no ``level`` is taken as pure noise (``l = 0``).
    """
    A = np.asarray(batch.actions, dtype=np.float32)
    B = A.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if omega is None:
        omega = rng.random(B, dtype=np.float32)
    if source is None:
        lo, hi = source_range
        level = rng.uniform(lo, hi, size=B).astype(np.float32)
        eps = rng.standard_normal(A.shape, dtype=np.float32)
        l3 = level[:, None, None]
        source = l3 * A + (1 - l3) * eps
    elif level is None:
        level = 0.0
    omega = np.asarray(omega, dtype=np.float32).reshape(B)
    source = np.asarray(source, dtype=np.float32)
    w3 = omega[:, None, None]
    x = w3 * A + (1 - w3) * source
    target = (A - source).reshape(B, -1)
    inp = flowhead.field_input(refiner_obs(batch.obs, np.broadcast_to(level, (B,))),
                               x.reshape(B, -1), omega)
    v, cache = nnet.forward_cache(params, inp)
    diff = v - target
    loss = float(np.sum(diff.astype(np.float64) ** 2) / B)
    if not math.isfinite(loss):
        raise NumericError("non-finite refiner loss")
    grads, _ = nnet.backward_cache(params, cache, (2.0 / B) * diff)
    return loss, grads


def cascade_denoise(params, sub: SubChunk, obs, config: S1Config = S1Config()) -> SubChunk:
    """Integrate the refiner field from omega = 0 to 1 starting at ``sub``."""
    config.validate()
    if not np.all(np.isfinite(sub.values)):
        raise NumericError("non-finite sub-chunk handed to the refiner")
    x = cascade_denoise_batch(params, sub.values[None], obs, sub.noise_level, config)
    return SubChunk(x[0], 1.0, sub.k)


def cascade_denoise_batch(params, values, obs, levels, config: S1Config = S1Config()) -> np.ndarray:
    """Vectorised :func:`cascade_denoise` over (B, h, d) sub-chunks with per-row noise levels."""
    values = np.asarray(values, dtype=np.float32)
    cond = refiner_obs(obs, np.broadcast_to(np.asarray(levels, np.float32), (len(values),)))
    return flowhead.integrate_rows(params, values, cond, 0.0, 1.0, config.delta)
