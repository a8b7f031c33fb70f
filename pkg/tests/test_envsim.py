import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from dualsys import envsim
from dualsys.errors import ConfigError, FormatError


def test_reset_is_deterministic():
    for env in envsim.ENV_IDS:
        a, oa = envsim.reset(env, 17)
        b, ob = envsim.reset(env, 17)
        assert oa.tobytes() == ob.tobytes()
        np.testing.assert_array_equal(a.agent, b.agent)


def test_reset_unknown_env():
    with pytest.raises(ConfigError):
        envsim.reset("pong", 0)


def test_reset_separation_over_1000_seeds():
    worst = np.inf
    for seed in range(1000):
        s, _ = envsim.reset("pusht_lite", seed)
        pts = [s.agent, s.block[:2], s.goal[:2]]
        worst = min(worst, min(np.linalg.norm(pts[i] - pts[j])
                               for i, j in ((0, 1), (0, 2), (1, 2))))
    assert worst >= envsim.MIN_SEPARATION


def test_reach_observation_schema():
    s, o = envsim.reset("reach2d", 0)
    assert s.block is None
    assert o.shape == (envsim.OBS_DIM["reach2d"],) == (6,)
    np.testing.assert_array_equal(o[4:], [1, 0])
    _, o2 = envsim.reset("pusht_lite", 0)
    assert o2.shape == (12,)
    assert np.all(np.abs(o2) <= 1)


def test_state_from_obs_round_trip():
    s, o = envsim.reset("pusht_lite", 5)
    r = envsim.state_from_obs("pusht_lite", o)
    np.testing.assert_allclose(r.agent, s.agent, atol=1e-3)
    np.testing.assert_allclose(r.block[:2], s.block[:2], atol=1e-3)
    assert abs(envsim.wrap_angle(r.block[2] - s.block[2])) < 1e-5


def test_far_agent_zero_action_changes_only_step():
    s, _ = envsim.reset("pusht_lite", 3)
    s2, _, done, _ = envsim.step(s, [0, 0])
    np.testing.assert_array_equal(s2.agent, s.agent)
    np.testing.assert_array_equal(s2.block, s.block)
    assert s2.step == s.step + 1 and not done


def test_reach_forced_success():
    s = envsim.EnvState("reach2d", np.array([195.0, 200.0]), np.array([200.0, 200.0]))
    _, _, done, ok = envsim.step(s, [8, 0])
    assert ok and done


def test_action_is_clamped():
    s = envsim.EnvState("reach2d", np.array([100.0, 100.0]), np.array([400.0, 400.0]))
    s2, *_ = envsim.step(s, [50, -50])
    np.testing.assert_allclose(s2.agent, [108, 92])


def test_episode_cap_sets_done():
    s = envsim.EnvState("reach2d", np.array([100.0, 100.0]), np.array([400.0, 400.0]), step=299)
    _, _, done, ok = envsim.step(s, [0, 0])
    assert done and not ok


def _head_on_state(offset_x=0.0):
    # block at the centre, theta 0, agent just below the stem moving up
    block = np.array([256.0, 256.0, 0.0])
    agent = np.array([256.0 + offset_x, 256.0 + envsim.Y_STEM_BOTTOM - envsim.AGENT_RADIUS - 1])
    return envsim.EnvState("pusht_lite", agent, np.array([100.0, 100.0, 0.0]), block)


def test_head_on_push_translates_without_rotation():
    s = _head_on_state()
    y0 = s.block[1]
    for _ in range(5):
        s, *_ = envsim.step(s, [0, 6])
    assert s.block[1] > y0 + 10
    assert s.block[0] == pytest.approx(256.0, abs=1e-9)
    assert abs(s.block[2]) < 1e-9


def test_off_centre_push_rotates_mirror_image():
    # pushes left and right of the centroid line give opposite rotations
    l, r = _head_on_state(-10.0), _head_on_state(10.0)
    for _ in range(5):
        l, *_ = envsim.step(l, [0, 6])
        r, *_ = envsim.step(r, [0, 6])
    assert l.block[2] != 0
    assert l.block[2] == pytest.approx(-r.block[2], abs=1e-9)
    assert l.block[0] - 256 == pytest.approx(-(r.block[0] - 256), abs=1e-9)


def test_reach_expert_examples():
    s = envsim.EnvState("reach2d", np.array([200.0, 200.0]), np.array([200.0, 200.0]))
    np.testing.assert_array_equal(envsim.expert_action(s), [0, 0])
    s = envsim.EnvState("reach2d", np.array([200.0, 200.0]), np.array([300.0, 200.0]))
    np.testing.assert_allclose(envsim.expert_action(s), [8, 0])


def test_pusht_expert_success_rate():
    wins = sum(envsim.expert_rollout("pusht_lite", seed)[2] for seed in range(200))
    print(f"pusht_lite expert success {wins}/200")
    assert wins >= 190


def test_expert_is_deterministic():
    a = envsim.expert_rollout("pusht_lite", 4)[1]
    b = envsim.expert_rollout("pusht_lite", 4)[1]
    assert np.array_equal(np.array(a), np.array(b))


def _trace(ncand):
    cands = [envsim.CandidateTrack(0, 3, i, [(1.5 * i, 2.0), (3.25, 4.0 + i)]) for i in range(ncand)]
    return envsim.TraceExport(goal=(100.0, 120.0, 0.5), agent=[(1, 10.0, 11.0), (2, 12.0, 13.5)],
                              block=[(1, 200.0, 201.0, -0.25)], candidates=cands,
                              executed=[(1, 10.0, 11.0)])


def test_trace_round_trip(tmp_path):
    t = _trace(10)
    path = envsim.render_trace(t, tmp_path / "t.txt")
    assert envsim.parse_trace(path) == t


def test_ten_candidates_give_ten_tracks(tmp_path):
    path = envsim.render_trace(_trace(10), tmp_path / "t.txt")
    kinds = {ln.split()[0] for ln in path.read_text().splitlines()}
    assert {f"cand{i}" for i in range(10)} <= kinds


def test_trace_executed_only(tmp_path):
    t = envsim.TraceExport(executed=[(0, 1.0, 2.0), (1, 3.0, 4.0)])
    path = envsim.render_trace(t, tmp_path / "e.txt")
    lines = path.read_text().splitlines()
    assert all(ln.startswith("exec") for ln in lines)
    assert envsim.parse_trace(path) == t


def test_trace_empty_and_malformed(tmp_path):
    with pytest.raises(ValueError):
        envsim.render_trace(envsim.TraceExport(), tmp_path / "x.txt")
    with pytest.raises(FormatError) as ei:
        envsim.parse_trace_lines(["goal 0 0 1 2", "agent x 1 2 3"])
    assert ei.value.offset == 1


# --- properties ----------------------------------------------------------------

actions = st.tuples(st.floats(-12, 12), st.floats(-12, 12))


def _near_block_state(seed, rng_off):
    s, _ = envsim.reset("pusht_lite", seed)
    # put the agent just outside the block so pushes actually happen
    ang = rng_off
    d = envsim.T_EXTENT + envsim.AGENT_RADIUS - 20
    s.agent = np.clip(s.block[:2] + d * np.array([math.cos(ang), math.sin(ang)]), 0, envsim.ARENA)
    return s


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), ang=st.floats(-math.pi, math.pi), a=actions)
def test_step_deterministic(seed, ang, a):
    s = _near_block_state(seed, ang)
    x, ox, *_ = envsim.step(s, a)
    y, oy, *_ = envsim.step(s.copy(), a)
    assert ox.tobytes() == oy.tobytes()
    assert x.block.tobytes() == y.block.tobytes()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), ang=st.floats(-math.pi, math.pi), a=actions)
def test_mirror_commutes_with_step(seed, ang, a):
    s = _near_block_state(seed, ang)
    ma = (a[0], -a[1])
    left, *_ = envsim.step(envsim.mirror_state(s), ma)
    right = envsim.mirror_state(envsim.step(s, a)[0])
    np.testing.assert_allclose(left.agent, right.agent, atol=1e-6)
    np.testing.assert_allclose(left.block[:2], right.block[:2], atol=1e-6)
    assert abs(envsim.wrap_angle(left.block[2] - right.block[2])) < 1e-6


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), a=actions)
def test_block_still_without_contact(seed, a):
    s, _ = envsim.reset("pusht_lite", seed)
    clear = envsim.block_clearance(s, s.agent)
    s2, *_ = envsim.step(s, a)
    if clear > envsim.AGENT_RADIUS + np.hypot(8, 8):
        assert s2.block.tobytes() == s.block.tobytes()


@settings(max_examples=60, deadline=None)
@given(seed=st.integers(0, 10_000), ang=st.floats(-math.pi, math.pi), a=actions)
def test_state_invariants_after_step(seed, ang, a):
    s = _near_block_state(seed, ang)
    s2, o, *_ = envsim.step(s, a)
    assert np.all((s2.agent >= 0) & (s2.agent <= envsim.ARENA))
    assert -math.pi < s2.block[2] <= math.pi
    assert np.all(np.abs(o) <= 1)


@given(st.floats(-50, 50))
def test_wrap_angle_range(a):
    w = envsim.wrap_angle(a)
    assert -math.pi < w <= math.pi
    assert math.isclose(math.cos(w), math.cos(a), abs_tol=1e-9)
