"""Dual-rate executor: a slow planner publishing selected chunks and a fast actor refining them.

Both workers run on a logical clock in milliseconds. Planner cycle ``j``
starts at ``max(j * period, previous publication)`` and publishes
``latency`` later; the actor starts once the first plan is out (cold start)
and then ticks at a fixed period, fetching the newest plan at every
sub-chunk boundary. A plan's segments are consumed in order until a newer
plan appears, which restarts at segment 0.
"""
from __future__ import annotations

import math
import threading
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import cascade, envsim, flowhead, valuehead
from .datastore import NormStats
from .errors import ConfigError, StartupError

MODES = ("full", "no_cascade", "no_repeat", "no_system1", "random_select")


# --- shared slot -------------------------------------------------------------

@dataclass
class Plan:
    seq: int
    t_pub: float  # ms
    tick: int  # ticks executed when the plan's observation was taken
    candidates: flowhead.CandidateSet
    obs: np.ndarray  # raw observation the plan was made from
    t_obs: float = 0.0  # ms, when that observation was taken

    @property
    def selected(self) -> int:
        return self.candidates.selected

    @property
    def chunk(self) -> flowhead.ActionChunk:
        return self.candidates.chunks[self.candidates.selected]


class PlanSlot:
    """Single-writer single-reader latest-value cell."""

    def __init__(self):
        self._lock = threading.Lock()
        self._plan: Plan | None = None
        self._seq = 0

    @property
    def seq(self) -> int:
        return self._seq

    def publish(self, candidates, t_pub: float, tick: int, obs, t_obs: float | None = None) -> Plan:
        if candidates.selected is None:
            raise ValueError("publish needs a candidate set with a selected index")
        t_obs = t_pub if t_obs is None else t_obs
        with self._lock:
            self._seq += 1
            plan = Plan(self._seq, float(t_pub), int(tick), candidates, np.asarray(obs),
                        float(t_obs))
            self._plan = plan
        return plan

    def latest(self) -> Plan | None:
        with self._lock:
            return self._plan


# --- configuration -----------------------------------------------------------

@dataclass(frozen=True)
class ScheduleConfig:
    s2_period_ms: float = 250.0
    s1_period_ms: float = 1000.0 / 6
    tick_ms: float = 1000.0 / 90
    h: int = 15
    s2_latency_ms: float = 0.0
    s1_latency_ms: float = 0.0

    def validate(self) -> "ScheduleConfig":
        if min(self.s2_period_ms, self.s1_period_ms, self.tick_ms) <= 0:
            raise ConfigError("periods must be positive")
        if self.s2_latency_ms < 0 or self.s1_latency_ms < 0:
            raise ConfigError("latencies must be >= 0")
        if abs(self.h * self.tick_ms - self.s1_period_ms) > 0.01 * self.s1_period_ms:
            raise ConfigError(f"h * tick = {self.h * self.tick_ms:.3f} ms differs from the "
                              f"System-1 period {self.s1_period_ms:.3f} ms by more than 1%")
        return self


@dataclass
class PolicyModels:
    norm: NormStats
    s2: object  # MlpParams of the chunk generator
    s1: object | None  # MlpParams of the refiner
    ensemble: valuehead.CriticEnsemble | None
    flow: flowhead.FlowConfig = flowhead.FlowConfig()
    s1_config: cascade.S1Config = cascade.S1Config()
    scorer: object = None  # scorer(raw_obs, stacked normalised chunks) -> values


# --- planner / actor steps ---------------------------------------------------

def plan_once(models: PolicyModels, slot: PlanSlot, obs, rng, *, t_pub=0.0, tick=0,
              mode: str = "full", t_obs=None) -> Plan:
    """Sample candidates, pick one, publish it."""
    cands = flowhead.sample_candidates(models.s2, models.norm.normalize_obs(obs), models.flow,
                                       rng, noise_levels=_levels(models.flow, mode))
    _select(models, cands, obs, rng, mode)
    return slot.publish(cands, t_pub, tick, obs, t_obs)


@dataclass
class Cursor:
    """Actor-side bookkeeping: which plan is being consumed and its next segment."""

    seq: int = 0
    k: int = 0


def refine_segment(models: PolicyModels, plan: Plan, k: int, obs, mode: str = "full"):
    """World-frame actions (h, 2) for segment ``k`` of ``plan`` given the current observation."""
    h = models.s1_config.h
    norm = models.norm
    sub = cascade.segment(plan.chunk, h)[k]
    world = norm.denormalize_action(sub.values, plan.obs)
    if mode in ("no_cascade", "no_system1") or models.s1 is None:
        return world
    local = norm.normalize_action(world, obs)
    out = cascade.cascade_denoise(models.s1, cascade.SubChunk(local, sub.noise_level, k),
                                  norm.normalize_obs(obs), models.s1_config)
    return norm.denormalize_action(out.values, obs)


def fetch_segment(slot: PlanSlot, cursor: Cursor, K: int):
    """Latest-wins fetch. Returns ``(plan, k)`` or ``None`` when the newest plan is used up."""
    plan = slot.latest()
    if plan is None:
        raise StartupError("plan slot is empty: run one blocking plan_once before acting")
    if plan.seq != cursor.seq:
        cursor.seq, cursor.k = plan.seq, 0
    if cursor.k >= K:
        return None
    k = cursor.k
    cursor.k += 1
    return plan, k


def act_subchunk(models: PolicyModels, slot: PlanSlot, cursor: Cursor, state, mode="full"):
    """Fetch the newest plan, refine its next segment and step the environment ``h`` times.

    Returns ``(state, executed actions, done, success, (seq, k))``.
    """
    K = models.flow.H // models.s1_config.h
    got = fetch_segment(slot, cursor, K)
    if got is None:
        raise StartupError(f"plan {cursor.seq} is fully consumed and no newer plan exists")
    plan, k = got
    actions = refine_segment(models, plan, k, envsim.observe(state), mode)
    done = ok = False
    executed = []
    for a in actions:
        state, _, done, ok = envsim.step(state, a)
        executed.append(np.clip(a, -envsim.A_MAX, envsim.A_MAX))
        if done:
            break
    return state, np.array(executed), done, ok, (plan.seq, k)


# --- planner timeline ----------------------------------------------------------

class PlannerClock:
    """Start and publication times of successive planner cycles."""

    def __init__(self, cfg: ScheduleConfig):
        self.cfg = cfg
        self.starts: list[float] = []
        self.pubs: list[float] = []

    def next_cycle(self) -> tuple[float, float]:
        j = len(self.starts)
        s = j * self.cfg.s2_period_ms
        if self.pubs:
            s = max(s, self.pubs[-1])
        p = s + self.cfg.s2_latency_ms
        self.starts.append(s)
        self.pubs.append(p)
        return s, p

    @property
    def overrun(self) -> bool:
        return self.cfg.s2_latency_ms > self.cfg.s2_period_ms


# --- rollouts ----------------------------------------------------------------

@dataclass
class PlanRecord:
    seq: int
    t_pub: float
    tick: int
    selected: int
    values: list
    noise_levels: list
    chunks_world: np.ndarray  # (N, H, 2)
    agent: np.ndarray  # agent position the plan was made from
    t_obs: float = 0.0


@dataclass
class SubRecord:
    tick: int
    seq: int
    k: int
    staleness_ms: float  # time since the plan was published, at fetch


@dataclass
class RolloutTrace:
    env_id: str
    seed: int
    mode: str
    actions: list = field(default_factory=list)  # (tick, ax, ay)
    plans: list = field(default_factory=list)  # PlanRecord
    subs: list = field(default_factory=list)  # SubRecord
    agent: list = field(default_factory=list)  # (tick, x, y) after each tick
    block: list = field(default_factory=list)  # (tick, x, y, theta)
    goal: tuple = ()
    starved_ticks: int = 0
    success: bool = False

    @property
    def ticks(self) -> int:
        return len(self.actions)

    def select_counts(self, n: int) -> np.ndarray:
        return np.bincount([p.selected for p in self.plans], minlength=n)


def _record_plan(trace: RolloutTrace, plan: Plan, norm: NormStats, agent):
    chunks = plan.candidates.stacked()
    world = np.stack([norm.denormalize_action(c, plan.obs) for c in chunks])
    trace.plans.append(PlanRecord(plan.seq, plan.t_pub, plan.tick, plan.selected,
                                  list(plan.candidates.values), plan.candidates.noise_levels,
                                  world, np.array(agent, dtype=float), plan.t_obs))


def _select(models: PolicyModels, cands, obs, rng, mode):
    if len(cands) == 1:
        cands.values, cands.selected = [math.nan], 0
    elif mode == "random_select":
        cands.values = [math.nan] * len(cands)
        cands.selected = int(rng.integers(len(cands)))
    elif models.scorer is not None:
        valuehead.select_best(cands, None, obs, scorer=models.scorer)
    else:
        if models.ensemble is None:
            raise ConfigError("value selection needs a critic ensemble or a scorer")
        valuehead.select_best(cands, models.ensemble, models.norm.normalize_obs(obs))
    return cands


def rollout_episode(models: PolicyModels, env_id: str, seed: int,
                    schedule: ScheduleConfig = ScheduleConfig(), mode: str = "full",
                    cap: int = envsim.EPISODE_CAP) -> RolloutTrace:
    """Run planner and actor on the logical clock until the episode ends.

    A planner cycle observes the state at its start time and its plan becomes
    visible at its publication time. The actor fetches at sub-chunk
    boundaries, refines against the observation of that tick, and holds
    still (a starved tick) if the newest plan is already used up.
    Deterministic per ``(seed, models, schedule, mode)``.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    schedule.validate()
    h = models.s1_config.h
    if h != schedule.h:
        raise ConfigError(f"refiner h={h} but schedule h={schedule.h}")
    models.s1_config.validate(models.flow.H)
    K = models.flow.H // h
    plan_rng = np.random.default_rng([seed, 1])
    state, obs = envsim.reset(env_id, seed, cap)
    trace = RolloutTrace(env_id, seed, mode)
    trace.goal = tuple(float(v) for v in state.goal)
    slot = PlanSlot()
    clock = PlannerClock(schedule)

    # cold start: the first plan is computed before the actor moves
    start, pub = clock.next_cycle()
    plan = plan_once(models, slot, obs, plan_rng, t_pub=pub, tick=0, mode=mode, t_obs=start)
    _record_plan(trace, plan, models.norm, state.agent)
    t0 = pub
    next_start, next_pub = clock.next_cycle()
    in_flight: list = []  # (t_pub, tick, obs, agent, candidates, t_obs)
    cursor = Cursor()
    buffer: list = []
    tick = 0
    done = False
    while not done:
        now = t0 + tick * schedule.tick_ms
        while next_start <= now + 1e-9:
            o = envsim.observe(state)
            cands = flowhead.sample_candidates(models.s2, models.norm.normalize_obs(o),
                                               models.flow, plan_rng,
                                               noise_levels=_levels(models.flow, mode))
            _select(models, cands, o, plan_rng, mode)
            in_flight.append((next_pub, tick, o, state.agent.copy(), cands, now))
            next_start, next_pub = clock.next_cycle()
        while in_flight and in_flight[0][0] <= now + 1e-9:
            tp, ptick, o, agent, cands, tobs = in_flight.pop(0)
            plan = slot.publish(cands, tp, ptick, o, tobs)
            _record_plan(trace, plan, models.norm, agent)
        if not buffer:
            got = fetch_segment(slot, cursor, K)
            if got is not None:
                plan, k = got
                trace.subs.append(SubRecord(tick, plan.seq, k, now - plan.t_pub))
                buffer = list(refine_segment(models, plan, k, envsim.observe(state), mode))
        if buffer:
            a = np.clip(buffer.pop(0), -envsim.A_MAX, envsim.A_MAX)
        else:
            a = np.zeros(2)
            trace.starved_ticks += 1
        state, obs, done, ok = envsim.step(state, a)
        trace.actions.append((tick, float(a[0]), float(a[1])))
        trace.agent.append((tick, float(state.agent[0]), float(state.agent[1])))
        if state.block is not None:
            trace.block.append((tick, *(float(v) for v in state.block)))
        trace.success = ok
        tick += 1
    return trace


def _levels(cfg: flowhead.FlowConfig, mode: str):
    if mode == "no_repeat":
        return [1.0]
    if mode == "no_cascade":
        return [1.0] * cfg.N
    return None


# --- timing simulation ---------------------------------------------------------

@dataclass
class TimingReport:
    ticks: int
    plans: int
    subchunks: int
    starved_ticks: int
    tick_jitter_ms: float  # max |tick interval - nominal|
    staleness_ms: np.ndarray  # time since publication of the fetched plan, per fetch
    overrun: bool
    s1_overrun: bool
    obs_age_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))  # age of its observation

    @property
    def max_staleness_ms(self) -> float:
        return float(self.staleness_ms.max()) if len(self.staleness_ms) else 0.0

    def summary(self) -> dict:
        st = self.staleness_ms
        return {
            "ticks": self.ticks, "plans": self.plans, "subchunks": self.subchunks,
            "starved_ticks": self.starved_ticks, "tick_jitter_ms": self.tick_jitter_ms,
            "staleness_ms": {
                "min": float(st.min()) if len(st) else 0.0,
                "mean": float(st.mean()) if len(st) else 0.0,
                "p95": float(np.percentile(st, 95)) if len(st) else 0.0,
                "max": self.max_staleness_ms,
            },
            "obs_age_max_ms": float(self.obs_age_ms.max()) if len(self.obs_age_ms) else 0.0,
            "overrun": self.overrun, "s1_overrun": self.s1_overrun,
        }


def simulate_schedule(cfg: ScheduleConfig = ScheduleConfig(), ticks: int = 10_000,
                      K: int = 2) -> TimingReport:
    """Discrete-event run of both workers without models.

    The actor refines the next segment while the current one executes, so a
    fetch happens ``s1_latency`` before the segment's first tick. If that
    refinement cannot finish within a segment's duration, ticks slip and the
    slip shows up as jitter.
    """
    cfg.validate()
    clock = PlannerClock(cfg)
    start0, pub0 = clock.next_cycle()
    seq_pub = [pub0]  # publication time of plan seq = index + 1
    seq_start = [start0]
    clock.next_cycle()
    t0 = pub0
    cursor_seq, cursor_k = 0, 0
    times: list[float] = []
    stale: list[float] = []
    age: list[float] = []
    starved = subs = 0
    left = 0  # ticks left in the current segment
    t = t0
    slip = max(0.0, cfg.s1_latency_ms - cfg.h * cfg.tick_ms)
    for i in range(ticks):
        if left == 0:
            fetch = t if i == 0 else t - min(cfg.s1_latency_ms, cfg.h * cfg.tick_ms)
            while clock.pubs[-1] <= fetch + 1e-9:
                seq_pub.append(clock.pubs[-1])
                seq_start.append(clock.starts[-1])
                clock.next_cycle()
            newest = len(seq_pub)
            if newest != cursor_seq:
                cursor_seq, cursor_k = newest, 0
            if cursor_k < K:
                stale.append(max(0.0, fetch - seq_pub[newest - 1]))
                age.append(max(0.0, fetch - seq_start[newest - 1]))
                cursor_k += 1
                subs += 1
                left = cfg.h
                if i > 0:
                    t += slip
            else:
                starved += 1
        times.append(t)
        if left:
            left -= 1
        t += cfg.tick_ms
    dt = np.diff(np.array(times))
    jitter = float(np.max(np.abs(dt - cfg.tick_ms))) if len(dt) else 0.0
    return TimingReport(ticks, len(seq_pub), subs, starved, jitter, np.array(stale),
                        clock.overrun, slip > 0, np.array(age))


# --- trace files ---------------------------------------------------------------

def to_export(trace: RolloutTrace) -> envsim.TraceExport:
    """Polylines of a rollout: candidates as open-loop agent paths, commanded points as ``exec``."""
    cands = []
    for p in trace.plans:
        for i, chunk in enumerate(p.chunks_world):
            pts = p.agent[None, :] + np.cumsum(np.clip(chunk, -envsim.A_MAX, envsim.A_MAX), axis=0)
            cands.append(envsim.CandidateTrack(p.seq, p.tick, i, [tuple(q) for q in pts]))
    executed = []
    prev = None
    for (t, ax, ay), (_, x, y) in zip(trace.actions, trace.agent):
        if prev is None:
            prev = (x - ax, y - ay)
        executed.append((t, prev[0] + ax, prev[1] + ay))
        prev = (x, y)
    return envsim.TraceExport(trace.goal, list(trace.agent), list(trace.block), cands, executed)


def format_rollout(trace: RolloutTrace) -> list[str]:
    """Envsim polyline records plus ``plan`` and ``sub`` blocks.

    ``plan seq t_pub selected q0 .. qN-1`` (q is ``nan`` when no value was used)
    ``sub tick seq k staleness_ms``
    """
    f = envsim._f
    lines = [f"# rollout {trace.env_id} seed={trace.seed} mode={trace.mode} "
             f"success={int(trace.success)} ticks={trace.ticks} starved={trace.starved_ticks}"]
    lines += envsim.format_trace(to_export(trace))
    for p in trace.plans:
        lines.append(f"plan {p.seq} {f(p.t_pub)} {p.selected} " + " ".join(f(v) for v in p.values))
    for s in trace.subs:
        lines.append(f"sub {s.tick} {s.seq} {s.k} {f(s.staleness_ms)}")
    return lines


def write_rollout(trace: RolloutTrace, path) -> Path:
    path = Path(path)
    path.write_text("\n".join(format_rollout(trace)) + "\n", encoding="utf-8")
    return path


def parse_plan_lines(lines) -> list[tuple]:
    """``(seq, t_pub, selected, values)`` for every ``plan`` record."""
    out = []
    for line in lines:
        parts = line.split()
        if parts and parts[0] == "plan":
            out.append((int(parts[1]), float(parts[2]), int(parts[3]),
                        [float(v) for v in parts[4:]]))
    return out


# --- optional wall-clock mode ------------------------------------------------------

def rollout_wallclock(models: PolicyModels, env_id: str, seed: int,
                      schedule: ScheduleConfig = ScheduleConfig(), mode: str = "full",
                      cap: int = envsim.EPISODE_CAP, speed: float = 1.0) -> RolloutTrace:
    """Same loop on two real threads. Not deterministic; timing follows ``speed`` x real time.

    The planner thread plans back to back (at most once per period); the
    actor thread owns the environment and only reads the slot.
    """
    if mode not in MODES:
        raise ConfigError(f"mode must be one of {MODES}, got {mode!r}")
    schedule.validate()
    K = models.flow.H // models.s1_config.h
    rng = np.random.default_rng([seed, 1])
    state, obs = envsim.reset(env_id, seed, cap)
    trace = RolloutTrace(env_id, seed, mode)
    trace.goal = tuple(float(v) for v in state.goal)
    slot = PlanSlot()
    lock = threading.Lock()
    shared = {"obs": obs, "agent": state.agent.copy(), "tick": 0}
    stop = threading.Event()
    start = time.perf_counter()

    def now_ms():
        return (time.perf_counter() - start) * 1000.0 * speed

    plan = plan_once(models, slot, obs, rng, t_pub=now_ms(), tick=0, mode=mode, t_obs=0.0)
    _record_plan(trace, plan, models.norm, state.agent)

    def planner():
        while not stop.is_set():
            t_begin = now_ms()
            with lock:
                o, agent, tk = shared["obs"], shared["agent"].copy(), shared["tick"]
            cands = flowhead.sample_candidates(models.s2, models.norm.normalize_obs(o),
                                               models.flow, rng,
                                               noise_levels=_levels(models.flow, mode))
            _select(models, cands, o, rng, mode)
            p = slot.publish(cands, now_ms(), tk, o, t_begin)
            with lock:
                _record_plan(trace, p, models.norm, agent)
            wait = schedule.s2_period_ms - (now_ms() - t_begin)
            if wait > 0:
                stop.wait(wait / 1000.0 / speed)

    worker = threading.Thread(target=planner, daemon=True)
    worker.start()
    cursor = Cursor()
    buffer: list = []
    tick = 0
    done = False
    try:
        while not done:
            t_tick = tick * schedule.tick_ms
            if not buffer:
                got = fetch_segment(slot, cursor, K)
                if got is not None:
                    p, k = got
                    trace.subs.append(SubRecord(tick, p.seq, k, now_ms() - p.t_pub))
                    buffer = list(refine_segment(models, p, k, envsim.observe(state), mode))
            if buffer:
                a = np.clip(buffer.pop(0), -envsim.A_MAX, envsim.A_MAX)
            else:
                a = np.zeros(2)
                trace.starved_ticks += 1
            state, obs, done, ok = envsim.step(state, a)
            with lock:
                shared.update(obs=obs, agent=state.agent.copy(), tick=tick + 1)
                trace.actions.append((tick, float(a[0]), float(a[1])))
                trace.agent.append((tick, float(state.agent[0]), float(state.agent[1])))
                if state.block is not None:
                    trace.block.append((tick, *(float(v) for v in state.block)))
            trace.success = ok
            tick += 1
            lag = t_tick + schedule.tick_ms - now_ms()
            if lag > 0:
                time.sleep(lag / 1000.0 / speed)
    finally:
        stop.set()
        worker.join()
    trace.plans.sort(key=lambda r: r.seq)
    return trace
