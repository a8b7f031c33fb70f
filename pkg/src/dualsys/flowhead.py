"""Conditional flow-matching action generator and the partial-denoise candidate ladder.

Noise level ``tau`` runs from 0 (pure Gaussian noise) to 1 (clean action).
A noisy chunk is ``tau * A + (1 - tau) * eps``; its velocity along ``tau``
is ``A - eps``, which is the regression target of the field, so forward
Euler integration carries noise to data.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .errors import ConfigError, NumericError, ShapeError

TIME_FREQS = 8


@dataclass
class ActionChunk:
    values: np.ndarray  # (H, act_dim), normalised action space
    noise_level: float

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float32)
        if not 0.0 <= self.noise_level <= 1.0:
            raise ValueError(f"noise level {self.noise_level} outside [0, 1]")

    @property
    def horizon(self) -> int:
        return self.values.shape[0]


@dataclass(frozen=True)
class FlowConfig:
    H: int = 30
    N: int = 5
    xi: float = 0.1
    delta: float = 0.1
    steps: int = 10
    act_dim: int = 2
    hidden: tuple = (256, 256)

    def validate(self) -> "FlowConfig":
        if self.H < 1 or self.N < 1:
            raise ConfigError("H and N must be positive")
        if not 0.0 <= self.xi <= 1.0 / self.N:
            raise ConfigError(f"xi={self.xi} outside [0, 1/N]")
        if not 1.0 - (self.N - 1) * self.xi > 0:
            raise ConfigError("lowest candidate noise level must stay above 0")
        if abs(self.delta * self.steps - 1.0) > 1e-9:
            raise ConfigError(f"delta * steps = {self.delta * self.steps}, must equal 1")
        return self

    def noise_levels(self) -> list[float]:
        return [1.0 - n * self.xi for n in range(self.N)]


@dataclass
class CandidateSet:
    chunks: list  # ActionChunk
    values: list | None = None
    selected: int | None = None

    @property
    def noise_levels(self) -> list[float]:
        return [c.noise_level for c in self.chunks]

    def __len__(self):
        return len(self.chunks)

    def stacked(self) -> np.ndarray:
        return np.stack([c.values for c in self.chunks])


@dataclass
class FlowBatch:
    obs: np.ndarray  # (B, obs_dim), normalised
    actions: np.ndarray  # (B, H, act_dim), normalised


def time_features(tau) -> np.ndarray:
    tau = np.atleast_1d(np.asarray(tau, dtype=np.float32))
    k = np.arange(1, TIME_FREQS + 1, dtype=np.float32) * np.float32(math.pi)
    ang = tau[:, None] * k[None, :]
    return np.concatenate([np.sin(ang), np.cos(ang)], axis=1).astype(np.float32)


def field_in_dim(obs_dim: int, horizon: int, act_dim: int) -> int:
    return obs_dim + horizon * act_dim + 2 * TIME_FREQS


def init_field(obs_dim: int, horizon: int, act_dim: int, hidden, rng) -> nnet.MlpParams:
    sizes = [field_in_dim(obs_dim, horizon, act_dim), *hidden, horizon * act_dim]
    return nnet.init_mlp(sizes, rng, hidden="silu")


def field_input(obs, flat_values, tau) -> np.ndarray:
    obs = np.atleast_2d(obs)
    flat_values = np.atleast_2d(flat_values)
    tau = np.broadcast_to(np.asarray(tau, dtype=np.float32), (len(flat_values),))
    if len(obs) == 1 and len(flat_values) > 1:
        obs = np.broadcast_to(obs, (len(flat_values), obs.shape[1]))
    return np.concatenate([obs, flat_values, time_features(tau)], axis=1).astype(np.float32)


def velocity(params: nnet.MlpParams, values, obs, tau) -> np.ndarray:
    """Evaluate the field on (B, h, d) chunks; returns the same shape."""
    values = np.asarray(values, dtype=np.float32)
    B = values.shape[0]
    flat = values.reshape(B, -1)
    x = field_input(obs, flat, tau)
    if x.shape[1] != params.in_dim:
        raise ShapeError(f"field expects {params.in_dim} inputs, got {x.shape[1]}")
    return nnet.mlp_forward(params, x).reshape(values.shape)


def interpolate(clean: ActionChunk, noise: ActionChunk, tau: float) -> ActionChunk:
    if clean.values.shape != noise.values.shape:
        raise ShapeError(f"chunk {clean.values.shape} vs noise {noise.values.shape}")
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau={tau} outside [0, 1]")
    t = np.float32(tau)
    return ActionChunk(t * clean.values + (np.float32(1) - t) * noise.values, tau)


def fm_loss_and_grad(params: nnet.MlpParams, batch: FlowBatch, rng: np.random.Generator,
                     tau=None, noise=None):
    """Flow-matching loss ``mean_b ||v(A_tau, o, tau) - (A - eps)||^2`` and its gradient."""
    A = np.asarray(batch.actions, dtype=np.float32)
    B = A.shape[0]
    if B == 0:
        raise ValueError("empty batch")
    if tau is None:
        tau = rng.random(B, dtype=np.float32)
    if noise is None:
        noise = rng.standard_normal(A.shape, dtype=np.float32)
    tau = np.asarray(tau, dtype=np.float32).reshape(B)
    t3 = tau[:, None, None]
    noisy = t3 * A + (1 - t3) * noise
    target = (A - noise).reshape(B, -1)
    x = field_input(batch.obs, noisy.reshape(B, -1), tau)
    v, cache = nnet.forward_cache(params, x)
    diff = v - target
    loss = float(np.sum(diff.astype(np.float64) ** 2) / B)
    if not math.isfinite(loss):
        raise NumericError("non-finite flow-matching loss")
    grads, _ = nnet.backward_cache(params, cache, (2.0 / B) * diff)
    return loss, grads


def integrate_rows(params, values, obs, tau_from, tau_to, delta):
    """Euler over (B, h, d) rows with per-row end times.

    A row whose end is not a whole number of steps away takes a shortened last step.
    """
    x = np.array(values, dtype=np.float32, copy=True)
    B = x.shape[0]
    start = np.broadcast_to(np.asarray(tau_from, dtype=np.float64), (B,))
    end = np.broadcast_to(np.asarray(tau_to, dtype=np.float64), (B,))
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float32))
    if len(obs) == 1 and B > 1:
        obs = np.broadcast_to(obs, (B, obs.shape[1]))
    k = 0
    while True:
        cur = start + k * delta
        active = cur < end - 1e-9
        if not np.any(active):
            break
        h = np.minimum(delta, end - cur)[active]
        rows = np.flatnonzero(active)
        v = velocity(params, x[rows], obs[rows], cur[active].astype(np.float32))
        x[rows] = x[rows] + h.astype(np.float32)[:, None, None] * v
        if not np.all(np.isfinite(x[rows])):
            raise NumericError(f"non-finite state during Euler step {k}")
        k += 1
    return x


def euler_integrate(params, start: ActionChunk, obs, tau_from: float, tau_to: float,
                    delta: float = 0.1) -> ActionChunk:
    """Forward Euler ``A <- A + delta * v(A, o, tau)`` from ``tau_from`` to ``tau_to``."""
    if not 0.0 <= tau_from <= tau_to <= 1.0:
        raise ConfigError(f"need 0 <= tau_from <= tau_to <= 1, got {tau_from}, {tau_to}")
    n = (tau_to - tau_from) / delta
    if abs(n - round(n)) > 1e-9:
        raise ConfigError(f"interval {tau_to - tau_from} is not a whole number of steps {delta}")
    x = integrate_rows(params, start.values[None], obs, tau_from, tau_to, delta)
    return ActionChunk(x[0], tau_to)


def sample_candidates(params, obs, config: FlowConfig, rng: np.random.Generator,
                      noise_levels=None) -> CandidateSet:
    """Candidate ladder: chunk ``n`` integrates its own noise draw from 0 to ``1 - n*xi``."""
    config.validate()
    taus = np.array(config.noise_levels() if noise_levels is None else noise_levels)
    x0 = rng.standard_normal((len(taus), config.H, config.act_dim), dtype=np.float32)
    x = integrate_rows(params, x0, obs, 0.0, taus, config.delta)
    return CandidateSet([ActionChunk(x[i], float(taus[i])) for i in range(len(taus))])


def sample_actions(params, obs, config: FlowConfig, rng, count: int) -> np.ndarray:
    """Fully denoised samples, one per row of ``obs`` (or ``count`` for a single obs)."""
    obs = np.atleast_2d(obs)
    B = max(count, len(obs))
    x0 = rng.standard_normal((B, config.H, config.act_dim), dtype=np.float32)
    return integrate_rows(params, x0, obs, 0.0, 1.0, config.delta)


@dataclass
class TrainLog:
    losses: list = field(default_factory=list)


def train_field(params, obs, actions, steps: int, rng, batch_size: int = 256,
                hyper: nnet.AdamHyper = nnet.AdamHyper(lr=1e-3), log_every: int = 0,
                loss_fn=fm_loss_and_grad):
    """Minibatch Adam on the flow-matching loss; ``obs``/``actions`` already normalised."""
    opt = nnet.Adam(params, hyper)
    log = TrainLog()
    n = len(obs)
    for it in range(steps):
        idx = rng.integers(0, n, size=min(batch_size, n))
        loss, grads = loss_fn(opt.params, FlowBatch(obs[idx], actions[idx]), rng)
        opt.step(grads)
        if log_every and it % log_every == 0:
            log.losses.append((it, loss))
    return opt.params, log
