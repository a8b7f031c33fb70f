"""Training stages: generator first, then value head and refiner against the frozen generator."""
from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np

from . import cascade, datastore, flowhead, nnet, valuehead
from .datastore import NormStats

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class StageBudget:
    s2_steps: int = 20_000
    value_steps: int = 10_000
    s1_steps: int = 10_000
    batch_size: int = 256
    lr: float = 1e-3


def chunk_arrays(episodes, norm: NormStats, H: int, gamma=datastore.DEFAULT_GAMMA):
    """Chunked transitions with normalised observations and frame-rotated, scaled chunks."""
    b = datastore.make_chunks(episodes, H, 1, gamma)
    obs = norm.normalize_obs(b.obs)
    acts = norm.normalize_action(b.actions, b.obs)
    nxt = norm.normalize_obs(b.next_obs)
    return b, obs, acts, nxt


def train_s2(episodes, flow: flowhead.FlowConfig, budget: StageBudget, seed: int,
             norm: NormStats | None = None):
    """Fit normalisation and the chunk generator. Returns ``(params, norm, losses)``."""
    flow.validate()
    norm = norm or NormStats.fit(episodes)
    _, obs, acts, _ = chunk_arrays(episodes, norm, flow.H)
    rng = np.random.default_rng([seed, 2])
    params = flowhead.init_field(norm.feature_dim, flow.H, flow.act_dim, flow.hidden, rng)
    params, tl = flowhead.train_field(params, obs, acts, budget.s2_steps, rng,
                                      batch_size=budget.batch_size,
                                      hyper=nnet.AdamHyper(lr=budget.lr),
                                      log_every=max(1, budget.s2_steps // 20))
    return params, norm, tl.losses


def train_value(episodes, norm: NormStats, s2_params, flow: flowhead.FlowConfig,
                config: valuehead.ValueTrainConfig, budget: StageBudget, seed: int):
    """Cal-QL on H-step chunks with the generator checksummed and checked every step."""
    config.validate()
    b, obs, acts, nxt = chunk_arrays(episodes, norm, flow.H, config.gamma)
    rng = np.random.default_rng([seed, 3])
    frozen = nnet.checksum(s2_params)
    learner = valuehead.ValueLearner.create(norm.feature_dim, flow.H * flow.act_dim, config, rng,
                                            frozen_checksum=frozen)
    flat = acts.reshape(len(acts), -1)
    logs = []
    for it in range(budget.value_steps):
        idx = rng.integers(0, len(obs), size=min(config.batch_size, len(obs)))
        batch = valuehead.ValueBatch(obs[idx], flat[idx], b.reward[idx], nxt[idx],
                                     b.terminal[idx], b.mc_return[idx], b.discount[idx])
        out = valuehead.train_step_value(learner, batch, rng, frozen_params=s2_params)
        if it % max(1, budget.value_steps // 20) == 0:
            logs.append((it, out))
            log.debug("value step %d %s", it, out)
    return learner, logs


def train_s1(episodes, norm: NormStats, s1: cascade.S1Config, budget: StageBudget, seed: int,
             act_dim: int = 2):
    """Refiner on h-step sub-chunks paired with the observation at their first tick."""
    s1.validate()
    _, obs, acts, _ = chunk_arrays(episodes, norm, s1.h)
    rng = np.random.default_rng([seed, 4])
    params = cascade.init_refiner(norm.feature_dim, s1.h, act_dim, s1.hidden, rng)

    def loss_fn(p, batch, r):
        return cascade.s1_loss_and_grad(p, batch, r, source_range=s1.source_range)

    params, tl = flowhead.train_field(params, obs, acts, budget.s1_steps, rng,
                                      batch_size=budget.batch_size,
                                      hyper=nnet.AdamHyper(lr=budget.lr),
                                      log_every=max(1, budget.s1_steps // 20), loss_fn=loss_fn)
    return params, tl.losses
