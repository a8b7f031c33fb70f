"""State-action value head: twin critics, assisting actor, calibrated conservative Q-learning.

Critics map ``obs || flattened chunk`` to a scalar. The ensemble value is the
minimum of the two heads, for selection and for the Bellman backup alike.

The critic objective per head is::

    alpha * ( E_{a ~ pi}[max(Q(s, a), Q_mu(s))] - E_D[Q(s, A)] )
        + 0.5 * E_D[(Q(s, A) - stopgrad(r + g * (1 - done) * Qbar(s', a' ~ pi)))^2]

where ``Q_mu`` is the dataset's discounted return-to-go at ``s``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import nnet
from .errors import FrozenViolationError, NumericError, ShapeError

LOG_STD_MIN, LOG_STD_MAX = -5.0, 2.0
_LOG_2PI = math.log(2 * math.pi)
_TANH_EPS = 1e-6


@dataclass(frozen=True)
class ValueTrainConfig:
    alpha: float = 1.0
    gamma: float = 0.98
    polyak: float = 0.005
    proposals: int = 4
    batch_size: int = 256
    entropy_weight: float = 1e-3
    noise_aug_prob: float = 0.5
    noise_aug_range: tuple = (0.6, 1.0)
    hidden: tuple = (256, 256)
    critic_lr: float = 3e-4
    actor_lr: float = 3e-4

    def validate(self) -> "ValueTrainConfig":
        if self.alpha < 0:
            raise ValueError("alpha must be >= 0")
        if not 0 < self.gamma < 1:
            raise ValueError("gamma must lie in (0, 1)")
        if not 0 < self.polyak <= 1:
            raise ValueError("polyak rate must lie in (0, 1]")
        return self


@dataclass
class CriticEnsemble:
    online: list  # two MlpParams
    target: list  # two MlpParams
    polyak: float = 0.005

    def __post_init__(self):
        if len(self.online) != 2 or len(self.target) != 2:
            raise ShapeError("ensemble needs exactly two critics and two targets")
        for o, t in zip(self.online, self.target):
            if [w.shape for w in o.weights] != [w.shape for w in t.weights]:
                raise ShapeError("target shapes must mirror online shapes")

    @classmethod
    def create(cls, in_dim: int, hidden, rng, polyak: float = 0.005) -> "CriticEnsemble":
        online = [nnet.init_mlp([in_dim, *hidden, 1], rng, hidden="silu") for _ in range(2)]
        return cls(online, [p.copy() for p in online], polyak)

    @property
    def in_dim(self) -> int:
        return self.online[0].in_dim

    def polyak_update(self) -> None:
        rho = np.float32(self.polyak)
        new = []
        for o, t in zip(self.online, self.target):
            new.append(nnet.MlpParams(
                [(1 - rho) * tw + rho * ow for ow, tw in zip(o.weights, t.weights)],
                [(1 - rho) * tb + rho * ob for ob, tb in zip(o.biases, t.biases)],
                list(t.activations)))
        self.target = new


@dataclass
class ActorNet:
    """Squashed Gaussian over flattened chunks: ``a = tanh(mu + sigma * z)``."""

    params: nnet.MlpParams

    @classmethod
    def create(cls, obs_dim: int, act_flat: int, hidden, rng) -> "ActorNet":
        return cls(nnet.init_mlp([obs_dim, *hidden, 2 * act_flat], rng, hidden="silu"))

    @property
    def act_dim(self) -> int:
        return self.params.out_dim // 2

    def dist(self, obs):
        out = nnet.mlp_forward(self.params, np.atleast_2d(obs))
        mu, raw = out[:, : self.act_dim], out[:, self.act_dim:]
        return mu, np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)

    def sample(self, obs, rng, count: int = 1):
        """Draw ``count`` chunks per observation row: returns (B, count, D)."""
        mu, ls = self.dist(obs)
        z = rng.standard_normal((mu.shape[0], count, mu.shape[1]), dtype=np.float32)
        return np.tanh(mu[:, None, :] + np.exp(ls)[:, None, :] * z)

    def mean_action(self, obs):
        return np.tanh(self.dist(obs)[0])


def _critic_input(obs, chunks):
    obs = np.atleast_2d(np.asarray(obs, dtype=np.float32))
    flat = np.asarray(chunks, dtype=np.float32)
    flat = flat.reshape(len(flat), -1) if flat.ndim > 1 else flat[None, :]
    if len(obs) == 1 and len(flat) > 1:
        obs = np.broadcast_to(obs, (len(flat), obs.shape[1]))
    if len(obs) != len(flat):
        raise ShapeError(f"{len(obs)} observations vs {len(flat)} chunks")
    return np.concatenate([obs, flat], axis=1)


def critic_values(critics, obs, chunks) -> np.ndarray:
    """(2, B) values of both heads."""
    x = _critic_input(obs, chunks)
    if x.shape[1] != critics[0].in_dim:
        raise ShapeError(f"critic expects {critics[0].in_dim} inputs, got {x.shape[1]}")
    return np.stack([nnet.mlp_forward(p, x)[:, 0] for p in critics])


def q_value(ens: CriticEnsemble, obs, chunk):
    """Conservative (min over both heads) value.

    A single observation vector with a single chunk gives a float; a batch of
    observations with one chunk per row gives an array.
    """
    obs = np.asarray(obs, dtype=np.float32)
    if obs.ndim == 1:
        return float(critic_values(ens.online, obs, np.reshape(chunk, (1, -1))).min())
    return critic_values(ens.online, obs, np.reshape(chunk, (len(obs), -1))).min(axis=0)


@dataclass
class ValueBatch:
    obs: np.ndarray  # (B, obs_dim) normalised
    actions: np.ndarray  # (B, D) flattened normalised chunk
    reward: np.ndarray
    next_obs: np.ndarray
    terminal: np.ndarray
    mc_return: np.ndarray
    discount: np.ndarray | None = None

    def __len__(self):
        return len(self.obs)


def bellman_target(batch: ValueBatch, targets, actor: ActorNet | None, gamma=None,
                   rng: np.random.Generator | None = None) -> np.ndarray:
    """``r + g * (1 - terminal) * min_i Qbar_i(s', a')`` with ``a' ~ actor``.

    ``gamma=None`` uses the per-row ``batch.discount``. Terminal rows never
    evaluate the critics.
    """
    r = np.asarray(batch.reward, dtype=np.float32)
    term = np.asarray(batch.terminal, dtype=bool)
    if gamma is None and batch.discount is None:
        raise ValueError("need gamma or per-row discounts")
    g = batch.discount if gamma is None else np.full(len(r), gamma, dtype=np.float32)
    y = r.astype(np.float32).copy()
    live = np.flatnonzero(~term)
    if len(live):
        nxt = np.asarray(batch.next_obs, dtype=np.float32)[live]
        if actor is None:
            raise ValueError("non-terminal rows need an actor for the backup")
        a2 = actor.sample(nxt, rng if rng is not None else np.random.default_rng(0))[:, 0]
        qn = critic_values(targets, nxt, a2).min(axis=0)
        y[live] += np.asarray(g, dtype=np.float32)[live] * qn
    return y


def calql_loss(ens: CriticEnsemble, actor: ActorNet, batch: ValueBatch,
               config: ValueTrainConfig, rng: np.random.Generator,
               targets: np.ndarray | None = None, proposals: np.ndarray | None = None):
    """Calibrated conservative critic loss summed over both heads.

    Returns ``(loss, [grads_q1, grads_q2], info)``. ``targets`` (Bellman
    targets) and ``proposals`` (B, m, D actor chunks) may be supplied to make
    the computation deterministic.
    """
    B = len(batch)
    if targets is None:
        gamma = None if batch.discount is not None else config.gamma
        targets = bellman_target(batch, ens.target, actor, gamma, rng)
    if proposals is None:
        proposals = actor.sample(batch.obs, rng, config.proposals)
    m = proposals.shape[1]
    x_data = _critic_input(batch.obs, batch.actions)
    obs_rep = np.repeat(np.asarray(batch.obs, dtype=np.float32), m, axis=0)
    x_prop = _critic_input(obs_rep, proposals.reshape(B * m, -1))
    q_mu = np.repeat(np.asarray(batch.mc_return, dtype=np.float32), m)
    x = np.concatenate([x_data, x_prop])
    total = 0.0
    grads = []
    info = {"td": 0.0, "reg": 0.0}
    for p in ens.online:
        out, cache = nnet.forward_cache(p, x)
        q = out[:, 0]
        qd, qp = q[:B], q[B:]
        err = qd - targets
        td = 0.5 * float(np.mean(err.astype(np.float64) ** 2))
        above = qp > q_mu
        reg = float(np.mean(np.where(above, qp, q_mu))) - float(np.mean(qd))
        total += config.alpha * reg + td
        info["td"] += td
        info["reg"] += reg
        up = np.empty_like(q)
        up[:B] = err / B - config.alpha / B
        up[B:] = config.alpha * above.astype(np.float32) / (B * m)
        g, _ = nnet.backward_cache(p, cache, up[:, None].astype(np.float32))
        grads.append(g)
    if not math.isfinite(total):
        raise NumericError("non-finite critic loss")
    return total, grads, info


def actor_loss_and_grad(actor: ActorNet, critics, obs, rng, entropy_weight: float):
    """SAC-style actor loss ``mean(w * log pi(a|s) - min_i Q_i(s, a))`` via reparameterisation."""
    obs = np.asarray(obs, dtype=np.float32)
    B = len(obs)
    out, cache = nnet.forward_cache(actor.params, obs)
    D = actor.act_dim
    mu, raw = out[:, :D], out[:, D:]
    ls = np.clip(raw, LOG_STD_MIN, LOG_STD_MAX)
    sig = np.exp(ls)
    z = rng.standard_normal(mu.shape, dtype=np.float32)
    u = mu + sig * z
    a = np.tanh(u)
    one_m = 1 - a * a
    logp = np.sum(-0.5 * z * z - ls - 0.5 * _LOG_2PI - np.log(one_m + _TANH_EPS), axis=1)
    x = _critic_input(obs, a)
    qs, gq = [], []
    for p in critics:
        o, c = nnet.forward_cache(p, x)
        qs.append(o[:, 0])
        gq.append(c)
    qs = np.stack(qs)
    pick = np.argmin(qs, axis=0)
    qmin = qs[pick, np.arange(B)]
    dq_da = np.zeros_like(a)
    for i, p in enumerate(critics):
        rows = pick == i
        if not np.any(rows):
            continue
        up = rows.astype(np.float32)[:, None]
        _, gx = nnet.backward_cache(p, gq[i], up)
        dq_da += gx[:, obs.shape[1]:]
    dsquash = 2 * a * one_m / (one_m + _TANH_EPS)  # d/du of -log(1 - tanh(u)^2)
    g_mu = entropy_weight * dsquash - dq_da * one_m
    g_ls = entropy_weight * (-1 + dsquash * sig * z) - dq_da * one_m * sig * z
    g_ls = g_ls * ((raw > LOG_STD_MIN) & (raw < LOG_STD_MAX))
    upstream = np.concatenate([g_mu, g_ls], axis=1) / B
    grads, _ = nnet.backward_cache(actor.params, cache, upstream.astype(np.float32))
    loss = float(np.mean(entropy_weight * logp - qmin))
    return loss, grads


@dataclass
class ValueLearner:
    """Mutable training state for the value head."""

    ensemble: CriticEnsemble
    actor: ActorNet
    config: ValueTrainConfig
    critic_opts: list = field(default_factory=list)
    actor_opt: nnet.Adam | None = None
    frozen_checksum: str | None = None

    def __post_init__(self):
        if not self.critic_opts:
            h = nnet.AdamHyper(lr=self.config.critic_lr)
            self.critic_opts = [nnet.Adam(p, h) for p in self.ensemble.online]
        if self.actor_opt is None:
            self.actor_opt = nnet.Adam(self.actor.params, nnet.AdamHyper(lr=self.config.actor_lr))

    @classmethod
    def create(cls, obs_dim: int, act_flat: int, config: ValueTrainConfig, rng,
               frozen_checksum: str | None = None) -> "ValueLearner":
        config.validate()
        ens = CriticEnsemble.create(obs_dim + act_flat, config.hidden, rng, config.polyak)
        actor = ActorNet.create(obs_dim, act_flat, config.hidden, rng)
        return cls(ens, actor, config, frozen_checksum=frozen_checksum)


def augment_with_noise(actions, rng, prob: float, tau_range) -> np.ndarray:
    """With probability ``prob`` per row, interpolate the chunk toward Gaussian noise."""
    actions = np.asarray(actions, dtype=np.float32)
    B = len(actions)
    tau = rng.uniform(tau_range[0], tau_range[1], size=B).astype(np.float32)
    tau = np.where(rng.random(B) < prob, tau, np.float32(1.0))[:, None]
    noise = rng.standard_normal(actions.shape, dtype=np.float32)
    return (tau * actions + (1 - tau) * noise).astype(np.float32)


def train_step_value(learner: ValueLearner, batch: ValueBatch, rng: np.random.Generator,
                     frozen_params: nnet.MlpParams | None = None) -> dict:
    """One critic step, one actor step and one polyak update. Returns scalar logs."""
    if learner.frozen_checksum is not None:
        if frozen_params is None or nnet.checksum(frozen_params) != learner.frozen_checksum:
            raise FrozenViolationError("System-2 generator parameters changed during value training")
    cfg = learner.config
    if cfg.noise_aug_prob > 0:
        batch = ValueBatch(batch.obs, augment_with_noise(batch.actions, rng, cfg.noise_aug_prob,
                                                          cfg.noise_aug_range),
                           batch.reward, batch.next_obs, batch.terminal, batch.mc_return,
                           batch.discount)
    loss, grads, info = calql_loss(learner.ensemble, learner.actor, batch, cfg, rng)
    learner.ensemble.online = [opt.step(g) for opt, g in zip(learner.critic_opts, grads)]
    aloss, agrads = actor_loss_and_grad(learner.actor, learner.ensemble.online, batch.obs, rng,
                                        cfg.entropy_weight)
    learner.actor = ActorNet(learner.actor_opt.step(agrads))
    learner.ensemble.polyak_update()
    return {"critic_loss": loss, "actor_loss": aloss, **info}


def select_best(candidates, ens: CriticEnsemble | None, obs, scorer=None) -> int:
    """Fill ``candidates.values`` and return the argmax (lowest index wins ties).

    ``scorer(obs, stacked_chunks) -> values`` replaces the learned critics when
    given (used for oracle-value experiments).
    """
    chunks = candidates.stacked()
    if scorer is not None:
        vals = np.asarray(scorer(obs, chunks), dtype=np.float64)
    else:
        vals = critic_values(ens.online, obs, chunks.reshape(len(chunks), -1)).min(axis=0)
    candidates.values = [float(v) for v in vals]
    candidates.selected = int(np.argmax(vals))
    return candidates.selected
