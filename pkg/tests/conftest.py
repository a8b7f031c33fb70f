"""Shared fixtures: small synthetic tasks with known answers."""
import numpy as np
import pytest

from dualsys import flowhead, nnet

GAUSS_H, GAUSS_D, GAUSS_SIGMA = 2, 2, 0.3


def gauss_mean(o):
    """Ground-truth chunk mean for the synthetic conditional-Gaussian task."""
    o = np.atleast_2d(o)[:, 0]
    return np.stack([o, -o, 0.5 * o + 0.2, np.zeros_like(o)], 1).reshape(-1, GAUSS_H, GAUSS_D)


@pytest.fixture(scope="session")
def gaussian_field():
    return train_gaussian_field()


def train_gaussian_field():
    """Flow field trained on A | o ~ N(mu(o), 0.3^2 I), o ~ U[-1, 1]."""
    rng = np.random.default_rng(0)
    n = 20_000
    obs = rng.uniform(-1, 1, (n, 1)).astype(np.float32)
    acts = (gauss_mean(obs) + GAUSS_SIGMA * rng.standard_normal((n, GAUSS_H, GAUSS_D)))
    p = flowhead.init_field(1, GAUSS_H, GAUSS_D, (64, 64), rng)
    p, _ = flowhead.train_field(p, obs, acts.astype(np.float32), 15_000, rng,
                                hyper=nnet.AdamHyper(lr=2e-3))
    return p


def linear_field(obs_dim, H, d, scale=-1.0, bias=None):
    """Identity-activation net computing ``v(A) = scale * A + bias`` (ignores obs and tau)."""
    flat = H * d
    w = np.zeros((flat, flowhead.field_in_dim(obs_dim, H, d)), np.float32)
    w[:, obs_dim:obs_dim + flat] = scale * np.eye(flat)
    b = np.zeros(flat, np.float32) if bias is None else np.asarray(bias, np.float32).reshape(flat)
    return nnet.MlpParams([w], [b], ["identity"])


# --- 5-state / 3-action chain --------------------------------------------------

CHAIN_S, CHAIN_A, CHAIN_GAMMA = 5, 3, 0.9


def chain_step(s, a):
    """Actions left/stay/right; stepping right off the end bounces back to state 3.

    Reward 1 for landing on state 4, so the optimum is right in 0..3 and stay in 4.
    """
    s2 = s + a - 1
    s2 = 0 if s2 < 0 else (3 if s2 > 4 else s2)
    return s2, float(s2 == 4)


def chain_q_star():
    q = np.zeros((CHAIN_S, CHAIN_A))
    for _ in range(500):
        v = q.max(1)
        q = np.array([[chain_step(s, a)[1] + CHAIN_GAMMA * v[chain_step(s, a)[0]]
                       for a in range(CHAIN_A)] for s in range(CHAIN_S)])
    return q


def chain_obs(s):
    o = -np.ones(CHAIN_S, np.float32)
    o[s] = 1
    return o


def chain_act(a):
    # actions as points on a line, inside the squashed actor's reach
    return np.array([0.8 * (a - 1)], np.float32)


def chain_dataset(rng, episodes=400, length=30):
    """Uniform-random behaviour rollouts with discounted return-to-go."""
    rows = []
    for _ in range(episodes):
        s, traj = int(rng.integers(CHAIN_S)), []
        for _ in range(length):
            a = int(rng.integers(CHAIN_A))
            s2, r = chain_step(s, a)
            traj.append((s, a, r, s2))
            s = s2
        ret = 0.0
        for s, a, r, s2 in reversed(traj):
            ret = r + CHAIN_GAMMA * ret
            rows.append((s, a, r, s2, ret))
    rows = np.array(rows)
    si, ai, ni = rows[:, 0].astype(int), rows[:, 1].astype(int), rows[:, 3].astype(int)
    return (np.stack([chain_obs(s) for s in si]), np.stack([chain_act(a) for a in ai]),
            rows[:, 2].astype(np.float32), np.stack([chain_obs(s) for s in ni]),
            rows[:, 4].astype(np.float32))


def train_chain_critic(seed=0, steps=5000):
    """Cal-QL on the chain; returns the (states x actions) table of learned min-Q."""
    from dualsys import valuehead as V

    rng = np.random.default_rng(seed)
    obs, act, rew, nxt, mc = chain_dataset(rng)
    # alpha sits below the chain's smallest action gap (about 0.7): the penalty lowers the
    # greedy action by alpha * (1/mu - 1) = 2 alpha under uniform behaviour, and a larger
    # alpha reorders actions by design rather than by error. The entropy weight keeps the
    # squashed actor off the saturated ends of [-1, 1], where its gradient dies.
    cfg = V.ValueTrainConfig(alpha=0.1, gamma=CHAIN_GAMMA, hidden=(64, 64), noise_aug_prob=0.0,
                             critic_lr=1e-3, actor_lr=1e-3, batch_size=128, entropy_weight=0.1)
    learner = V.ValueLearner.create(CHAIN_S, 1, cfg, rng)
    for _ in range(steps):
        i = rng.integers(0, len(obs), cfg.batch_size)
        b = V.ValueBatch(obs[i], act[i], rew[i], nxt[i], np.zeros(len(i), bool), mc[i])
        V.train_step_value(learner, b, rng)
    return np.array([[V.q_value(learner.ensemble, chain_obs(s), chain_act(a))
                      for a in range(CHAIN_A)] for s in range(CHAIN_S)])


@pytest.fixture(scope="session")
def gaussian_refiner():
    """Refiner field for the same conditional-Gaussian task, one sub-chunk per chunk."""
    from dualsys import cascade

    rng = np.random.default_rng(1)
    n = 20_000
    obs = rng.uniform(-1, 1, (n, 1)).astype(np.float32)
    acts = (gauss_mean(obs) + GAUSS_SIGMA * rng.standard_normal((n, GAUSS_H, GAUSS_D)))
    p = cascade.init_refiner(1, GAUSS_H, GAUSS_D, (64, 64), rng)
    p, _ = flowhead.train_field(p, obs, acts.astype(np.float32), 15_000, rng,
                                hyper=nnet.AdamHyper(lr=2e-3),
                                loss_fn=cascade.s1_loss_and_grad)
    return p
