"""Deterministic 2-D manipulation environments and their scripted experts.

Two tasks share one arena of 512 x 512 world units:

``reach2d``
    Move the agent (a disc) to within 10 units of a goal point.
``pusht_lite``
    Push a T-shaped block to a goal pose. Contact is quasi-static: whenever
    the agent disc penetrates the T, the block is translated along the contact
    normal by the penetration depth and rotated about its centroid by
    ``kappa * cross(r, n) * depth``, where ``r`` runs from the centroid to the
    contact point and ``kappa`` is the inverse of the mean squared vertex
    distance. Blocks have no momentum.

Observation layouts (float32, every entry in [-1, 1]):

==========  ======  ===========================================================
env         length  fields
==========  ======  ===========================================================
reach2d     6       ax, ay, gx, gy, task0, task1
pusht_lite  12      ax, ay, bx, by, cos(b), sin(b), gx, gy, cos(g), sin(g),
                    task0, task1
==========  ======  ===========================================================

Positions are divided by 512; ``task0/task1`` is the one-hot task id.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from .errors import ConfigError, FormatError, ShapeError

ENV_IDS = ("reach2d", "pusht_lite")
ARENA = 512.0
AGENT_RADIUS = 15.0
A_MAX = 8.0
EPISODE_CAP = 300
MIN_SEPARATION = 64.0
SUCCESS_POS = 20.0
SUCCESS_ROT = 0.2
REACH_TOL = 10.0
REACH_GAIN = 0.2
ROT_RANGE = math.pi / 6

ACTION_DIM = 2
OBS_DIM = {"reach2d": 6, "pusht_lite": 12}

# T geometry in the block frame, centroid at the origin: a 120x30 bar on top
# of a 30x90 stem.
_BAR_H, _BAR_W, _STEM_W, _STEM_H = 30.0, 120.0, 30.0, 90.0
_Y_OFF = (_BAR_W * _BAR_H * (_BAR_H / 2) - _STEM_W * _STEM_H * (_STEM_H / 2)) / (
    _BAR_W * _BAR_H + _STEM_W * _STEM_H)
Y_BAR_BOTTOM = -_Y_OFF
Y_BAR_TOP = Y_BAR_BOTTOM + _BAR_H
Y_STEM_BOTTOM = Y_BAR_BOTTOM - _STEM_H
# (center_x, center_y, half_w, half_h)
_RECTS = np.array([
    [0.0, Y_BAR_BOTTOM + _BAR_H / 2, _BAR_W / 2, _BAR_H / 2],
    [0.0, Y_BAR_BOTTOM - _STEM_H / 2, _STEM_W / 2, _STEM_H / 2],
])
T_VERTICES = np.array([
    [-60.0, Y_BAR_TOP], [60.0, Y_BAR_TOP], [60.0, Y_BAR_BOTTOM], [15.0, Y_BAR_BOTTOM],
    [15.0, Y_STEM_BOTTOM], [-15.0, Y_STEM_BOTTOM], [-15.0, Y_BAR_BOTTOM],
    [-60.0, Y_BAR_BOTTOM],
])
KAPPA = 1.0 / float(np.mean(np.sum(T_VERTICES ** 2, axis=1)))
T_EXTENT = float(np.max(np.linalg.norm(T_VERTICES, axis=1)))


def wrap_angle(a: float) -> float:
    """Wrap to (-pi, pi]."""
    a = math.fmod(a + math.pi, 2 * math.pi)
    if a <= 0:
        a += 2 * math.pi
    return a - math.pi


def _rot(theta):
    c, s = math.cos(theta), math.sin(theta)
    return np.array([[c, -s], [s, c]])


@dataclass
class EnvState:
    env_id: str
    agent: np.ndarray  # (2,)
    goal: np.ndarray  # (2,) reach2d, (3,) pusht_lite
    block: np.ndarray | None = None  # (3,) x, y, theta
    step: int = 0
    cap: int = EPISODE_CAP

    def copy(self) -> "EnvState":
        return replace(self, agent=self.agent.copy(), goal=self.goal.copy(),
                       block=None if self.block is None else self.block.copy())


def _check_env(env_id):
    if env_id not in ENV_IDS:
        raise ConfigError(f"unknown env id {env_id!r}; expected one of {ENV_IDS}")


def observe(state: EnvState) -> np.ndarray:
    a = state.agent / ARENA
    if state.env_id == "reach2d":
        g = state.goal / ARENA
        return np.array([a[0], a[1], g[0], g[1], 1.0, 0.0], dtype=np.float32)
    b, g = state.block, state.goal
    return np.array([
        a[0], a[1], b[0] / ARENA, b[1] / ARENA, math.cos(b[2]), math.sin(b[2]),
        g[0] / ARENA, g[1] / ARENA, math.cos(g[2]), math.sin(g[2]), 0.0, 1.0,
    ], dtype=np.float32)


def state_from_obs(env_id: str, obs, step: int = 0, cap: int = EPISODE_CAP) -> EnvState:
    """Rebuild a state from its observation (float32 rounding aside)."""
    _check_env(env_id)
    o = np.asarray(obs, dtype=np.float64)
    if o.shape != (OBS_DIM[env_id],):
        raise ShapeError(f"{env_id} observation must have shape ({OBS_DIM[env_id]},), got {o.shape}")
    if env_id == "reach2d":
        return EnvState(env_id, o[0:2] * ARENA, o[2:4] * ARENA, None, step, cap)
    block = np.array([o[2] * ARENA, o[3] * ARENA, math.atan2(o[5], o[4])])
    goal = np.array([o[6] * ARENA, o[7] * ARENA, math.atan2(o[9], o[8])])
    return EnvState(env_id, o[0:2] * ARENA, goal, block, step, cap)


def _block_sdf(block, points):
    """Signed distance from world points (n, 2) to the T; gradient points outward."""
    pts = np.atleast_2d(points)
    c, s = math.cos(block[2]), math.sin(block[2])
    rel = pts - block[:2]
    local = np.stack([c * rel[:, 0] + s * rel[:, 1], -s * rel[:, 0] + c * rel[:, 1]], axis=1)
    best = np.full(len(pts), np.inf)
    grad_local = np.zeros_like(local)
    for cx, cy, hw, hh in _RECTS:
        q = local - (cx, cy)
        d = np.abs(q) - (hw, hh)
        outside = np.maximum(d, 0.0)
        out_len = np.hypot(outside[:, 0], outside[:, 1])
        inside = np.minimum(np.maximum(d[:, 0], d[:, 1]), 0.0)
        sdf = out_len + inside
        # outward gradient
        g = np.where(out_len[:, None] > 0, outside / np.maximum(out_len, 1e-12)[:, None], 0.0)
        in_mask = out_len <= 0
        if np.any(in_mask):
            xdom = d[:, 0] >= d[:, 1]
            gi = np.where(xdom[:, None], np.array([1.0, 0.0]), np.array([0.0, 1.0]))
            g = np.where(in_mask[:, None], gi, g)
        g = g * np.where(q >= 0, 1.0, -1.0)
        better = sdf < best
        best = np.where(better, sdf, best)
        grad_local = np.where(better[:, None], g, grad_local)
    grad = np.stack([c * grad_local[:, 0] - s * grad_local[:, 1],
                     s * grad_local[:, 0] + c * grad_local[:, 1]], axis=1)
    return best, grad


def block_clearance(state: EnvState, point) -> float:
    """Distance from a world point to the block surface (negative inside)."""
    return float(_block_sdf(state.block, np.asarray(point, dtype=float))[0][0])


def _clamp(v):
    return np.clip(v, 0.0, ARENA)


def reset(env_id: str, seed: int, cap: int = EPISODE_CAP):
    """Seeded initial state. Returns ``(state, observation)``."""
    _check_env(env_id)
    rng = np.random.default_rng([seed, ENV_IDS.index(env_id)])
    while True:
        if env_id == "reach2d":
            agent = rng.uniform(32, ARENA - 32, size=2)
            goal = rng.uniform(32, ARENA - 32, size=2)
            if np.linalg.norm(agent - goal) >= MIN_SEPARATION:
                st = EnvState(env_id, agent, goal, None, 0, cap)
                return st, observe(st)
            continue
        agent = rng.uniform(32, ARENA - 32, size=2)
        bpos = rng.uniform(144, ARENA - 144, size=2)
        gpos = rng.uniform(144, ARENA - 144, size=2)
        gtheta = rng.uniform(-math.pi, math.pi)
        btheta = wrap_angle(gtheta + rng.uniform(-ROT_RANGE, ROT_RANGE))
        pts = [agent, bpos, gpos]
        if min(np.linalg.norm(pts[i] - pts[j]) for i, j in ((0, 1), (0, 2), (1, 2))) < MIN_SEPARATION:
            continue
        block = np.array([bpos[0], bpos[1], btheta])
        if _block_sdf(block, agent)[0][0] < AGENT_RADIUS + 4:
            continue
        st = EnvState(env_id, agent, np.array([gpos[0], gpos[1], gtheta]), block, 0, cap)
        return st, observe(st)


def is_success(state: EnvState) -> bool:
    if state.env_id == "reach2d":
        return bool(np.linalg.norm(state.agent - state.goal) < REACH_TOL)
    b, g = state.block, state.goal
    return bool(np.linalg.norm(b[:2] - g[:2]) < SUCCESS_POS
                and abs(wrap_angle(g[2] - b[2])) < SUCCESS_ROT)


def _resolve_contact(agent, block, iters=4):
    for _ in range(iters):
        sdf, grad = _block_sdf(block, agent)
        depth = AGENT_RADIUS - sdf[0]
        if depth <= 1e-9:
            break
        n_out = grad[0]
        push = -n_out
        contact = agent - n_out * sdf[0]
        r = contact - block[:2]
        dtheta = KAPPA * (r[0] * push[1] - r[1] * push[0]) * depth
        new_xy = _clamp(block[:2] + push * depth)
        block = np.array([new_xy[0], new_xy[1], wrap_angle(block[2] + dtheta)])
    # whatever the block could not absorb (arena walls) pushes the agent back
    sdf, grad = _block_sdf(block, agent)
    depth = AGENT_RADIUS - sdf[0]
    if depth > 1e-9:
        agent = _clamp(agent + grad[0] * depth)
    return agent, block


def step(state: EnvState, action):
    """Advance one control tick. Returns ``(state', obs, done, success)``."""
    a = np.clip(np.nan_to_num(np.asarray(action, dtype=float)), -A_MAX, A_MAX)
    agent = _clamp(state.agent + a)
    block = state.block
    if state.env_id == "pusht_lite":
        agent, block = _resolve_contact(agent, block.copy())
    nxt = EnvState(state.env_id, agent, state.goal.copy(), block, state.step + 1, state.cap)
    ok = is_success(nxt)
    done = ok or nxt.step >= nxt.cap
    return nxt, observe(nxt), done, ok


def mirror_state(state: EnvState) -> EnvState:
    """Reflect about the horizontal midline y = 256 (T angle maps to pi - theta)."""
    def pt(p):
        return np.array([p[0], ARENA - p[1]])

    def pose(p):
        return np.array([p[0], ARENA - p[1], wrap_angle(math.pi - p[2])])

    if state.env_id == "reach2d":
        return replace(state, agent=pt(state.agent), goal=pt(state.goal))
    return replace(state, agent=pt(state.agent), goal=pose(state.goal), block=pose(state.block))


# --- scripted experts --------------------------------------------------------

def _primitives():
    """Push contacts in the block frame: (contact point, outward normal)."""
    prims = []
    for x in (-50.0, -30.0, 0.0, 30.0, 50.0):
        prims.append(((x, Y_BAR_TOP), (0.0, 1.0)))
    for x in (-50.0, -36.0, 36.0, 50.0):
        prims.append(((x, Y_BAR_BOTTOM), (0.0, -1.0)))
    for sx in (-1.0, 1.0):
        prims.append(((60.0 * sx, (Y_BAR_TOP + Y_BAR_BOTTOM) / 2), (sx, 0.0)))
        for y in (-16.0, -45.0, -70.0):
            prims.append(((15.0 * sx, y), (sx, 0.0)))
    for x in (-8.0, 0.0, 8.0):
        prims.append(((x, Y_STEM_BOTTOM), (0.0, -1.0)))
    c = np.array([p[0] for p in prims])
    n = np.array([p[1] for p in prims])
    push = -n
    # rotation per unit of push
    omega = KAPPA * (c[:, 0] * push[:, 1] - c[:, 1] * push[:, 0])
    return c, n, omega


_PRIM_C, _PRIM_N, _PRIM_OMEGA = _primitives()
_PUSH_GRID = np.arange(1.0, 161.0, 1.0)
ROT_WEIGHT = 120.0  # world units per radian in the expert's pose cost
_STAGE_GAP = 2.0
_ORBIT_R = T_EXTENT + AGENT_RADIUS + 10.0


def pose_cost(block, goal) -> float:
    return float(np.linalg.norm(goal[:2] - block[:2])
                 + ROT_WEIGHT * abs(wrap_angle(goal[2] - block[2])))


def _plan_pushes(block, goal):
    """Best achievable cost and push length for every primitive (closed form model)."""
    R = _rot(block[2])
    push_w = -(_PRIM_N @ R.T)  # (P, 2) world push directions
    e = goal[:2] - block[:2]
    dth = wrap_angle(goal[2] - block[2])
    L = _PUSH_GRID[None, :]
    ex = e[0] - push_w[:, 0:1] * L
    ey = e[1] - push_w[:, 1:2] * L
    rot_err = np.abs(dth - _PRIM_OMEGA[:, None] * L)
    cost = np.hypot(ex, ey) + ROT_WEIGHT * rot_err
    j = np.argmin(cost, axis=1)
    best = cost[np.arange(len(j)), j]
    return best, _PUSH_GRID[j]


def _segment_clear(block, p, q, margin):
    n = max(2, int(np.linalg.norm(q - p) / 4.0) + 2)
    ts = np.linspace(0.0, 1.0, n)[:, None]
    pts = p[None, :] * (1 - ts) + q[None, :] * ts
    return bool(np.all(_block_sdf(block, pts)[0] >= AGENT_RADIUS + margin))


def _toward(p, q):
    d = q - p
    dist = float(np.linalg.norm(d))
    if dist <= A_MAX:
        return d
    return d / dist * A_MAX


def _navigate(block, agent, target, approach):
    if _segment_clear(block, agent, target, 0.5):
        return _toward(agent, target)
    if _segment_clear(block, agent, approach, 0.5):
        return _toward(agent, approach)
    # orbit around the block toward the approach point
    c = block[:2]
    rel = agent - c
    rad = float(np.linalg.norm(rel))
    ang = math.atan2(rel[1], rel[0])
    tgt = math.atan2(approach[1] - c[1], approach[0] - c[0])
    dang = wrap_angle(tgt - ang)
    step_ang = math.copysign(min(abs(dang), A_MAX / max(_ORBIT_R, 1.0)), dang)
    new_rad = rad + float(np.clip(_ORBIT_R - rad, -A_MAX, A_MAX))
    nxt = c + new_rad * np.array([math.cos(ang + step_ang), math.sin(ang + step_ang)])
    return _toward(agent, nxt)


def _in_arena(p, pad=AGENT_RADIUS):
    return bool(np.all(p >= pad) and np.all(p <= ARENA - pad))


def expert_action(state: EnvState) -> np.ndarray:
    """Deterministic scripted controller.

    reach2d: ``clip(0.2 * (goal - agent))``. pusht_lite cycles through three
    phases derived from the current state alone: pick the push contact whose
    modelled effect lowers the pose cost most, travel (orbiting around the
    block when the direct path is blocked) to a staging point just off that
    contact, then push along the contact normal while the push still helps.
    """
    if state.env_id == "reach2d":
        return np.clip(REACH_GAIN * (state.goal - state.agent), -A_MAX, A_MAX)
    block, goal, agent = state.block, state.goal, state.agent
    if is_success(state):
        return np.zeros(2)
    j0 = pose_cost(block, goal)
    best, lengths = _plan_pushes(block, goal)
    gain = j0 - best
    R = _rot(block[2])
    contact_w = _PRIM_C @ R.T + block[:2]
    normal_w = _PRIM_N @ R.T
    stage_w = contact_w + normal_w * (AGENT_RADIUS + _STAGE_GAP)

    # engaged: agent sits on a primitive's push line close to its contact
    rel = agent[None, :] - contact_w
    along = np.sum(rel * normal_w, axis=1)
    across = np.abs(rel[:, 0] * normal_w[:, 1] - rel[:, 1] * normal_w[:, 0])
    engaged = (across < 3.0) & (along > AGENT_RADIUS - 9.0) & (along < AGENT_RADIUS + 3.0)
    engaged &= gain > 0.5
    if np.any(engaged):
        idx = np.flatnonzero(engaged)
        i = int(idx[np.argmax(gain[idx])])
        gap = max(along[i] - AGENT_RADIUS, 0.0)
        dist = min(A_MAX, lengths[i] + gap)
        return -normal_w[i] * dist

    feasible = np.array([_in_arena(s) for s in stage_w])
    travel = np.linalg.norm(stage_w - agent, axis=1)
    score = np.where(feasible, gain - 0.05 * travel, -np.inf)
    if not np.any(np.isfinite(score)) or np.max(gain[feasible] if np.any(feasible) else [0]) <= 0.5:
        # nothing helps from here: push straight at the centroid along the goal line
        d = goal[:2] - block[:2]
        u = d / max(np.linalg.norm(d), 1e-9)
        behind = block[:2] - u * _ORBIT_R
        return _navigate(block, agent, behind, behind)
    i = int(np.argmax(score))
    approach = stage_w[i] + normal_w[i] * 40.0
    return _navigate(block, agent, stage_w[i], approach)


def expert_rollout(env_id: str, seed: int, cap: int = EPISODE_CAP):
    """Run the scripted expert from ``reset(env_id, seed)``; returns (states, actions, success)."""
    st, _ = reset(env_id, seed, cap)
    states, actions = [st], []
    done = ok = False
    while not done:
        a = expert_action(st)
        st, _, done, ok = step(st, a)
        actions.append(np.clip(a, -A_MAX, A_MAX))
        states.append(st)
    return states, actions, ok


# --- trace export ------------------------------------------------------------

@dataclass
class CandidateTrack:
    plan: int
    tick: int
    index: int
    points: list  # [(x, y), ...]


@dataclass
class TraceExport:
    """Polyline dump of one episode.

    Text format, one record per line: ``kind idx t x y [theta]``.

    ``goal``  goal point or pose (idx = t = 0)
    ``agent`` agent position after tick ``t``
    ``block`` block pose after tick ``t``
    ``cand<i>`` point of candidate ``i`` of plan ``idx`` proposed at tick ``t``
    ``exec``  executed trajectory point ``idx`` at tick ``t``
    """

    goal: tuple = ()
    agent: list = field(default_factory=list)  # (t, x, y)
    block: list = field(default_factory=list)  # (t, x, y, theta)
    candidates: list = field(default_factory=list)  # CandidateTrack
    executed: list = field(default_factory=list)  # (t, x, y)

    def is_empty(self):
        return not (self.agent or self.block or self.candidates or self.executed)


def _f(v) -> str:
    return repr(float(v))


def format_trace(trace: TraceExport) -> list[str]:
    lines = []
    if trace.goal:
        lines.append("goal 0 0 " + " ".join(_f(v) for v in trace.goal))
    for i, (t, x, y) in enumerate(trace.agent):
        lines.append(f"agent {i} {int(t)} {_f(x)} {_f(y)}")
    for i, (t, x, y, th) in enumerate(trace.block):
        lines.append(f"block {i} {int(t)} {_f(x)} {_f(y)} {_f(th)}")
    for c in trace.candidates:
        for x, y in c.points:
            lines.append(f"cand{c.index} {c.plan} {c.tick} {_f(x)} {_f(y)}")
    for i, (t, x, y) in enumerate(trace.executed):
        lines.append(f"exec {i} {int(t)} {_f(x)} {_f(y)}")
    return lines


def render_trace(trace: TraceExport, path) -> Path:
    """Write ``trace`` as UTF-8 text (format documented on :class:`TraceExport`)."""
    if trace.is_empty():
        raise ValueError("trace is empty")
    path = Path(path)
    path.write_text("\n".join(format_trace(trace)) + "\n", encoding="utf-8")
    return path


def parse_trace_lines(lines) -> TraceExport:
    trace = TraceExport()
    tracks: dict = {}
    for lineno, raw in enumerate(lines):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        parts = line.split()
        kind = parts[0]
        if kind not in ("goal", "agent", "block", "exec") and not kind.startswith("cand"):
            # other record kinds (plan/sub blocks) belong to runtime traces
            continue
        try:
            idx, t = int(parts[1]), int(parts[2])
            vals = [float(v) for v in parts[3:]]
        except (IndexError, ValueError):
            raise FormatError(f"malformed trace record {line!r}", lineno) from None
        if kind == "goal":
            trace.goal = tuple(vals)
        elif kind == "agent":
            trace.agent.append((t, vals[0], vals[1]))
        elif kind == "block":
            trace.block.append((t, vals[0], vals[1], vals[2]))
        elif kind == "exec":
            trace.executed.append((t, vals[0], vals[1]))
        elif kind.startswith("cand"):
            key = (idx, int(kind[4:]))
            if key not in tracks:
                tracks[key] = CandidateTrack(idx, t, int(kind[4:]), [])
                trace.candidates.append(tracks[key])
            tracks[key].points.append((vals[0], vals[1]))
    return trace


def parse_trace(path) -> TraceExport:
    return parse_trace_lines(Path(path).read_text(encoding="utf-8").splitlines())
