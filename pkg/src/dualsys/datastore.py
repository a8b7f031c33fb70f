"""Demonstration episodes, reward labels, return-to-go, chunking and the dataset file.

Dataset file layout (all integers little-endian)::

    b"HUMEDATA"            magic
    u32 version            currently 1
    u8  env tag            index into envsim.ENV_IDS
    u32 obs_dim, u32 act_dim
    u32 episode count
    per episode:
        u32 length, u8 success
        f32[length * obs_dim]  observations, row-major
        f32[length * act_dim]  actions, row-major
        f32[length]            rewards
"""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import envsim
from .errors import ConfigError, FormatError

DATA_MAGIC = b"HUMEDATA"
DATA_VERSION = 1
REWARD_TAIL = 3
DEFAULT_GAMMA = 0.98
STD_FLOOR = 1e-6


@dataclass
class Episode:
    observations: np.ndarray  # (L, obs_dim) float32
    actions: np.ndarray  # (L, act_dim) float32
    rewards: np.ndarray  # (L,) float32
    success: bool

    def __post_init__(self):
        self.observations = np.asarray(self.observations, dtype=np.float32)
        self.actions = np.asarray(self.actions, dtype=np.float32)
        self.rewards = np.asarray(self.rewards, dtype=np.float32)
        n = len(self.observations)
        if len(self.actions) != n or len(self.rewards) != n:
            raise ValueError("observations, actions and rewards must have equal length")

    def __len__(self):
        return len(self.observations)

    @property
    def dones(self) -> np.ndarray:
        d = np.zeros(len(self), dtype=bool)
        if len(self):
            d[-1] = True
        return d


def label_rewards(ep: Episode) -> Episode:
    """Reward 1 on the final three transitions of a successful episode, else 0."""
    r = np.zeros(len(ep), dtype=np.float32)
    if ep.success and len(ep):
        r[-min(REWARD_TAIL, len(ep)):] = 1.0
    return Episode(ep.observations, ep.actions, r, ep.success)


def mc_return(ep: Episode, gamma: float, t: int) -> float:
    if not 0 <= t < len(ep):
        raise IndexError(f"t={t} outside episode of length {len(ep)}")
    if not 0 < gamma < 1:
        raise ValueError("gamma must lie in (0, 1)")
    return float(returns_to_go(ep.rewards, gamma)[t])


def returns_to_go(rewards, gamma: float) -> np.ndarray:
    out = np.zeros(len(rewards), dtype=np.float64)
    acc = 0.0
    for k in range(len(rewards) - 1, -1, -1):
        acc = float(rewards[k]) + gamma * acc
        out[k] = acc
    return out


# --- demonstrations ----------------------------------------------------------

@dataclass(frozen=True)
class DemoConfig:
    """How demonstrations are generated.

    A fraction ``perturb_frac`` of episodes is run by a distracted expert who,
    with probability ``detour_rate`` per tick, commits to a random heading for
    ``detour_len`` ticks. Those episodes are slower and sometimes fail, which
    gives the value head contrast and the action generator a spread of
    behaviours to choose from.
    """

    env_id: str = "pusht_lite"
    episodes: int = 200
    seed: int = 0
    perturb_frac: float = 0.5
    detour_rate: float = 0.03
    detour_len: tuple = (8, 24)
    exec_noise: float = 0.0
    cap: int = envsim.EPISODE_CAP


def run_demo(env_id: str, seed: int, perturbed: bool, cfg: DemoConfig) -> Episode:
    rng = np.random.default_rng([seed, 7919])
    st, obs = envsim.reset(env_id, seed, cfg.cap)
    observations, actions = [], []
    detour_left, heading = 0, np.zeros(2)
    done = ok = False
    while not done:
        a = envsim.expert_action(st)
        if perturbed:
            if detour_left == 0 and rng.random() < cfg.detour_rate:
                detour_left = int(rng.integers(cfg.detour_len[0], cfg.detour_len[1] + 1))
                ang = rng.uniform(-np.pi, np.pi)
                heading = envsim.A_MAX * np.array([np.cos(ang), np.sin(ang)])
            if detour_left > 0:
                a = heading
                detour_left -= 1
        a = np.clip(a, -envsim.A_MAX, envsim.A_MAX)
        observations.append(obs)
        actions.append(a)
        if cfg.exec_noise > 0 and detour_left == 0:
            # executed action is jittered, the recorded label stays the expert's
            a = a + rng.normal(0.0, cfg.exec_noise, size=2)
        st, obs, done, ok = envsim.step(st, a)
    ep = Episode(np.array(observations), np.array(actions), np.zeros(len(actions)), ok)
    return label_rewards(ep)


def generate_demos(cfg: DemoConfig) -> tuple[list[Episode], dict]:
    """Roll out the (possibly perturbed) expert; returns episodes and a mix report."""
    rng = np.random.default_rng([cfg.seed, 104729])
    perturbed = rng.random(cfg.episodes) < cfg.perturb_frac
    eps = [run_demo(cfg.env_id, cfg.seed * 100_003 + i, bool(p), cfg)
           for i, p in enumerate(perturbed)]
    succ = np.array([e.success for e in eps])
    report = {
        "episodes": len(eps),
        "clean": int((~perturbed).sum()),
        "perturbed": int(perturbed.sum()),
        "success_clean": int(succ[~perturbed].sum()),
        "success_perturbed": int(succ[perturbed].sum()),
        "mean_length": float(np.mean([len(e) for e in eps])) if eps else 0.0,
    }
    return eps, report


# --- normalisation -----------------------------------------------------------

FRAMES = ("world", "block")
_REL_SCALE = 100.0  # world units per feature unit for block-frame offsets


def block_frame_features(obs) -> np.ndarray:
    """Pose features of a pusht_lite observation seen from the block.

    Columns: agent offset and goal offset in the block frame (both / 100),
    cos and sin of the goal-minus-block angle, agent distance to the block centre.
    """
    o = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    agent, block, goal = o[:, 0:2] * envsim.ARENA, o[:, 2:4] * envsim.ARENA, o[:, 6:8] * envsim.ARENA
    c, s = o[:, 4], o[:, 5]
    gc, gs = o[:, 8], o[:, 9]

    def local(v):
        return np.stack([c * v[:, 0] + s * v[:, 1], -s * v[:, 0] + c * v[:, 1]], axis=1)

    ra = local(agent - block) / _REL_SCALE
    rg = local(goal - block) / _REL_SCALE
    dc = gc * c + gs * s
    ds = gs * c - gc * s
    out = np.concatenate([ra, rg, dc[:, None], ds[:, None],
                          np.linalg.norm(ra, axis=1, keepdims=True)], axis=1)
    return out.astype(np.float32)


def rotate_actions(actions, obs, inverse: bool = False) -> np.ndarray:
    """World -> block frame (or back with ``inverse``) using the block angle in ``obs``.

    ``actions`` is (..., 2) with one leading row per observation row, or any
    shape when ``obs`` is a single observation.
    """
    o = np.atleast_2d(np.asarray(obs, dtype=np.float64))
    a = np.asarray(actions, dtype=np.float64)
    c, s = o[:, 4], o[:, 5]
    if len(o) == 1:
        c, s = c[0], s[0]
    else:
        extra = a.ndim - 2
        c = c.reshape((-1,) + (1,) * extra)
        s = s.reshape((-1,) + (1,) * extra)
    if inverse:
        s = -s
    x, y = a[..., 0], a[..., 1]
    return np.stack([c * x + s * y, -s * x + c * y], axis=-1).astype(np.float32)


@dataclass
class NormStats:
    """Observation features + z-scoring and the fixed affine action map ``a / a_max``.

    With ``frame="block"`` (pusht_lite) observations are first mapped to
    block-frame pose features and action chunks are rotated into the frame of
    the block at the chunk's first observation, which makes the policy
    invariant to where the block sits and how it is turned.
    """

    obs_mean: np.ndarray
    obs_std: np.ndarray
    act_mean: np.ndarray
    act_std: np.ndarray
    act_scale: float = envsim.A_MAX
    frame: str = "world"

    def __post_init__(self):
        if self.frame not in FRAMES:
            raise ConfigError(f"frame must be one of {FRAMES}, got {self.frame!r}")

    @staticmethod
    def default_frame(obs_dim: int) -> str:
        return "block" if obs_dim == envsim.OBS_DIM["pusht_lite"] else "world"

    @classmethod
    def fit(cls, episodes, frame: str | None = None) -> "NormStats":
        raw = np.concatenate([e.observations for e in episodes])
        if frame is None:
            frame = cls.default_frame(raw.shape[1])
        feats = (block_frame_features(raw) if frame == "block" else raw).astype(np.float64)
        act = np.concatenate([e.actions for e in episodes]).astype(np.float64)
        return cls(feats.mean(0).astype(np.float32),
                   np.maximum(feats.std(0), STD_FLOOR).astype(np.float32),
                   act.mean(0).astype(np.float32),
                   np.maximum(act.std(0), STD_FLOOR).astype(np.float32),
                   frame=frame)

    @property
    def feature_dim(self) -> int:
        return len(self.obs_mean)

    def features(self, o) -> np.ndarray:
        o = np.asarray(o, dtype=np.float32)
        if self.frame == "block":
            f = block_frame_features(o)
            return f[0] if o.ndim == 1 else f
        return o

    def normalize_obs(self, o):
        return ((self.features(o) - self.obs_mean) / self.obs_std).astype(np.float32)

    def denormalize_obs(self, z):
        """Back to feature space (raw observations when ``frame="world"``)."""
        return (np.asarray(z, dtype=np.float32) * self.obs_std + self.obs_mean).astype(np.float32)

    def normalize_action(self, a, obs=None):
        a = np.asarray(a, dtype=np.float32)
        if self.frame == "block":
            if obs is None:
                raise ValueError("block-frame actions need the observation that fixes the frame")
            a = rotate_actions(a, obs)
        return (a / np.float32(self.act_scale)).astype(np.float32)

    def denormalize_action(self, z, obs=None):
        a = np.asarray(z, dtype=np.float32) * np.float32(self.act_scale)
        if self.frame == "block":
            if obs is None:
                raise ValueError("block-frame actions need the observation that fixes the frame")
            a = rotate_actions(a, obs, inverse=True)
        return a.astype(np.float32)

    def to_dict(self) -> dict:
        return {k: np.asarray(getattr(self, k)).tolist()
                for k in ("obs_mean", "obs_std", "act_mean", "act_std")} | {
            "act_scale": float(self.act_scale), "frame": self.frame}

    @classmethod
    def from_dict(cls, d) -> "NormStats":
        return cls(*(np.asarray(d[k], dtype=np.float32)
                     for k in ("obs_mean", "obs_std", "act_mean", "act_std")),
                   act_scale=float(d["act_scale"]), frame=d.get("frame", "world"))


# --- chunking ----------------------------------------------------------------

REWARD_MODES = ("start", "discounted")


@dataclass
class TransitionBatch:
    obs: np.ndarray  # (n, obs_dim)
    actions: np.ndarray  # (n, H, act_dim)
    mask: np.ndarray  # (n, H) True where the action is real, False where padded
    reward: np.ndarray  # (n,)
    next_obs: np.ndarray  # (n, obs_dim)
    terminal: np.ndarray  # (n,) bool
    mc_return: np.ndarray  # (n,)
    discount: np.ndarray  # (n,) bootstrap factor for this row
    episode_id: np.ndarray  # (n,)
    start: np.ndarray  # (n,)
    meta: dict = field(default_factory=dict)

    def __len__(self):
        return len(self.obs)

    def take(self, idx) -> "TransitionBatch":
        return TransitionBatch(*(getattr(self, k)[idx] for k in (
            "obs", "actions", "mask", "reward", "next_obs", "terminal", "mc_return",
            "discount", "episode_id", "start")), meta=self.meta)


def make_chunks(episodes, H: int, stride: int = 1, gamma: float = DEFAULT_GAMMA,
                reward_mode: str = "discounted",
                cap: int = envsim.EPISODE_CAP) -> TransitionBatch:
    """Cut episodes into H-step action chunks.

    Rows start every ``stride`` ticks. A chunk running past the end of its
    episode repeats the final action; ``mask`` marks the padding and the row
    is terminal. ``reward_mode="start"`` uses the reward at the chunk's first
    tick and bootstraps with ``gamma``; ``"discounted"`` sums
    ``gamma**i * r[t+i]`` over the chunk and bootstraps with ``gamma**H``, so
    the chunk-level value of the behaviour policy equals ``mc_return``.
    """
    if H < 1 or stride < 1:
        raise ConfigError("H and stride must be >= 1")
    if H > cap:
        raise ConfigError(f"chunk horizon H={H} exceeds the episode cap {cap}")
    if reward_mode not in REWARD_MODES:
        raise ConfigError(f"reward_mode must be one of {REWARD_MODES}")
    cols = {k: [] for k in ("obs", "actions", "mask", "reward", "next_obs", "terminal",
                            "mc_return", "discount", "episode_id", "start")}
    disc_w = gamma ** np.arange(H)
    for eid, ep in enumerate(episodes):
        L = len(ep)
        if L == 0:
            continue
        rtg = returns_to_go(ep.rewards, gamma)
        for t in range(0, L, stride):
            idx = np.arange(t, t + H)
            valid = idx < L
            acts = ep.actions[np.minimum(idx, L - 1)]
            term = t + H >= L
            if reward_mode == "start":
                r, disc = float(ep.rewards[t]), gamma
            else:
                rs = np.where(valid, ep.rewards[np.minimum(idx, L - 1)], 0.0)
                r, disc = float(np.dot(disc_w, rs)), gamma ** H
            cols["obs"].append(ep.observations[t])
            cols["actions"].append(acts)
            cols["mask"].append(valid)
            cols["reward"].append(r)
            cols["next_obs"].append(ep.observations[min(t + H, L - 1)])
            cols["terminal"].append(term)
            cols["mc_return"].append(rtg[t])
            cols["discount"].append(disc)
            cols["episode_id"].append(eid)
            cols["start"].append(t)
    if not cols["obs"]:
        raise ConfigError("no chunks: every episode is empty")
    return TransitionBatch(
        np.array(cols["obs"], dtype=np.float32),
        np.array(cols["actions"], dtype=np.float32),
        np.array(cols["mask"], dtype=bool),
        np.array(cols["reward"], dtype=np.float32),
        np.array(cols["next_obs"], dtype=np.float32),
        np.array(cols["terminal"], dtype=bool),
        np.array(cols["mc_return"], dtype=np.float32),
        np.array(cols["discount"], dtype=np.float32),
        np.array(cols["episode_id"], dtype=np.int64),
        np.array(cols["start"], dtype=np.int64),
        meta={"H": H, "stride": stride, "gamma": gamma, "reward_mode": reward_mode},
    )


# --- file format -------------------------------------------------------------

def dataset_to_bytes(episodes, env_id: str) -> bytes:
    if env_id not in envsim.ENV_IDS:
        raise ConfigError(f"unknown env id {env_id!r}")
    obs_dim = envsim.OBS_DIM[env_id]
    parts = [DATA_MAGIC, struct.pack("<IBIII", DATA_VERSION, envsim.ENV_IDS.index(env_id),
                                     obs_dim, envsim.ACTION_DIM, len(episodes))]
    for ep in episodes:
        if ep.observations.shape[1:] != (obs_dim,) and len(ep):
            raise ConfigError(f"episode observation width {ep.observations.shape} != {obs_dim}")
        parts.append(struct.pack("<IB", len(ep), int(bool(ep.success))))
        for arr in (ep.observations, ep.actions, ep.rewards):
            parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def write_dataset(episodes, path, env_id: str) -> Path:
    path = Path(path)
    path.write_bytes(dataset_to_bytes(episodes, env_id))
    return path


def dataset_from_bytes(data: bytes):
    """Parse a dataset blob; returns ``(env_id, episodes)``."""
    if data[:8] != DATA_MAGIC:
        raise FormatError("bad dataset magic", 0)
    off = 8
    head = struct.calcsize("<IBIII")
    if len(data) < off + head:
        raise FormatError("truncated dataset header", off)
    version, tag, obs_dim, act_dim, count = struct.unpack_from("<IBIII", data, off)
    if version != DATA_VERSION:
        raise FormatError(f"unsupported dataset version {version}", off)
    if tag >= len(envsim.ENV_IDS):
        raise FormatError(f"unknown env tag {tag}", off + 4)
    off += head
    episodes = []
    for _ in range(count):
        if len(data) < off + 5:
            raise FormatError("truncated episode header", off)
        length, success = struct.unpack_from("<IB", data, off)
        off += 5
        arrays = []
        for width in (obs_dim, act_dim, 1):
            n = length * width
            if len(data) < off + 4 * n:
                raise FormatError("truncated episode payload", off)
            a = np.frombuffer(data, dtype="<f4", count=n, offset=off).astype(np.float32)
            arrays.append(a.reshape(length, width) if width > 1 else a)
            off += 4 * n
        episodes.append(Episode(arrays[0], arrays[1], arrays[2], bool(success)))
    if off != len(data):
        raise FormatError("trailing bytes after last episode", off)
    return envsim.ENV_IDS[tag], episodes


def read_dataset(path):
    return dataset_from_bytes(Path(path).read_bytes())
