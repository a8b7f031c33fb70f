"""Acceptance criteria 1-12, each at its stated tolerance.

Every test prints one ``[criterion N] PASS|FAIL ...`` line. Criteria 6, 8, 9
and 11 need trained pusht_lite models; they are trained once and cached under
``DUALSYS_ACCEPTANCE_CACHE`` (default ``.cache/acceptance`` in the repo).
Delete that directory to retrain from scratch (about 20 minutes on one core).
"""
import os
import shutil
import subprocess
import sys
import time
from pathlib import Path

import numpy as np
import pytest

from dualsys import (cascade, datastore, envsim, flowhead, nnet, runtime, toolkit, training,
                     valuehead)
from dualsys.errors import FormatError

from conftest import GAUSS_D, GAUSS_H, GAUSS_SIGMA, CHAIN_A, CHAIN_S, chain_q_star, gauss_mean
from conftest import train_chain_critic, train_gaussian_field

ROOT = Path(__file__).resolve().parents[1]
CACHE = Path(os.environ.get("DUALSYS_ACCEPTANCE_CACHE", ROOT / ".cache" / "acceptance"))
ENV = "pusht_lite"
EVAL_SEED = 20_000
EPISODES = 200

# training recipe for the cached pusht_lite models
CLEAN_DEMOS = 1000
PERTURBED_DEMOS = 500
S2_STEPS = 60_000
S1_STEPS = 30_000
VALUE_STEPS = 10_000


def report(n, ok, detail):
    print(f"\n[criterion {n}] {'PASS' if ok else 'FAIL'} {detail}", flush=True)
    return ok


# --- cached pipeline -------------------------------------------------------------

def _train_pipeline(mdir: Path):
    t = time.time()
    clean, _ = datastore.generate_demos(datastore.DemoConfig(ENV, CLEAN_DEMOS, 0, perturb_frac=0.0))
    pert, _ = datastore.generate_demos(datastore.DemoConfig(ENV, PERTURBED_DEMOS, 50_000,
                                                            perturb_frac=1.0))
    datastore.write_dataset(clean + pert, mdir / "demos.bin", ENV)
    flow = flowhead.FlowConfig()
    # the generator imitates clean demos only; the critic also sees the detours
    s2, norm, _ = training.train_s2(clean, flow, training.StageBudget(s2_steps=S2_STEPS), 0)
    manifest = toolkit.save_s2(mdir, s2, norm, flow, ENV)
    print(f"  generator trained ({time.time() - t:.0f}s)", flush=True)
    learner, _ = training.train_value(clean + pert, norm, s2, flow, valuehead.ValueTrainConfig(),
                                      training.StageBudget(value_steps=VALUE_STEPS), 0)
    toolkit.require_frozen_s2(mdir)
    for i in range(2):
        toolkit.save_role(mdir, f"critic{i}", learner.ensemble.online[i], manifest)
        toolkit.save_role(mdir, f"target{i}", learner.ensemble.target[i], manifest)
    toolkit.save_role(mdir, "actor", learner.actor.params, manifest)
    print(f"  value head trained ({time.time() - t:.0f}s)", flush=True)
    s1cfg = cascade.S1Config()
    s1, _ = training.train_s1(clean, norm, s1cfg, training.StageBudget(s1_steps=S1_STEPS), 0)
    toolkit.save_role(mdir, "s1", s1, manifest)
    from dataclasses import asdict
    manifest["s1_config"] = asdict(s1cfg)
    toolkit.write_manifest(mdir, manifest)
    (mdir / "DONE").write_text("ok\n")
    print(f"  refiner trained ({time.time() - t:.0f}s)", flush=True)


@pytest.fixture(scope="session")
def model_dir():
    mdir = CACHE / "models"
    if not (mdir / "DONE").exists():
        mdir.mkdir(parents=True, exist_ok=True)
        print(f"\ntraining acceptance models into {mdir}", flush=True)
        _train_pipeline(mdir)
    return mdir


@pytest.fixture(scope="session")
def models(model_dir):
    return toolkit.load_models(model_dir)


@pytest.fixture(scope="session")
def learned_rows(models):
    modes = ["full", "no_cascade", "no_system1", "random_select"]
    return {r.mode: r for r in toolkit.run_ablation(models, ENV, modes, EPISODES, EVAL_SEED)}


# --- 1 ---------------------------------------------------------------------------

def test_c01_gradient_suite():
    t = time.time()
    worst = {}
    for act in nnet.ACTIVATIONS:
        worst[act] = nnet.grad_check(nnet.random_net_builder(act), trials=20, seed=1)
    dt = time.time() - t
    ok = max(worst.values()) < 1e-3 and dt < 30
    report(1, ok, f"worst rel err {max(worst.values()):.2e} over 20 nets x {len(worst)} "
                  f"activations, {dt:.1f}s")
    assert ok


# --- 2 ---------------------------------------------------------------------------

def test_c02_flow_sampler_fidelity():
    t = time.time()
    gaussian_field = train_gaussian_field()
    cfg = flowhead.FlowConfig(H=GAUSS_H, N=1, act_dim=GAUSS_D)
    errs = []
    for o in (-0.8, -0.3, 0.0, 0.4, 0.9):
        s = flowhead.sample_actions(gaussian_field, np.array([[o]], np.float32), cfg,
                                    np.random.default_rng(100), 5000)
        errs.append((np.abs(s.mean(0) - gauss_mean(o)[0]).max(),
                     np.abs(s.std(0) - GAUSS_SIGMA).max()))
    me, se = max(e[0] for e in errs), max(e[1] for e in errs)
    ok = me < 0.05 and se < 0.1 and time.time() - t < 300
    report(2, ok, f"max mean err {me:.3f} (<0.05), max std err {se:.3f} (<0.1), "
                  f"training + sampling {time.time() - t:.0f}s")
    assert ok


# --- 3 ---------------------------------------------------------------------------

def test_c03_candidate_ladder():
    cfg = flowhead.FlowConfig(N=5, xi=0.1)
    levels = cfg.noise_levels()
    w = np.zeros((60, flowhead.field_in_dim(4, 30, 2)), np.float32)
    w[:, 4:64] = -np.eye(60)
    field = nnet.MlpParams([w], [np.zeros(60, np.float32)], ["identity"])
    A0 = np.random.default_rng(0).normal(size=(30, 2))
    out = flowhead.euler_integrate(field, flowhead.ActionChunk(A0, 0.0), np.zeros(4), 0.0, 1.0)
    err = float(np.abs(out.values - 0.9 ** 10 * A0).max())
    ok = levels == [1.0, 0.9, 0.8, 0.7, 0.6] and err < 1e-6
    report(3, ok, f"levels {levels}, closed-form err {err:.1e}")
    assert ok


# --- 4 ---------------------------------------------------------------------------

def test_c04_calql_chain_ranking():
    t = time.time()
    q = train_chain_critic(seed=0, steps=5000)
    best = chain_q_star().argmax(1)
    acc = float(np.mean(q.argmax(1) == best))
    dt = time.time() - t
    ok = acc >= 0.9 and dt < 120
    report(4, ok, f"optimal action ranked first in {acc:.0%} of {CHAIN_S} states "
                  f"({CHAIN_A} actions), 5000 steps, {dt:.0f}s")
    assert ok


# --- 5 ---------------------------------------------------------------------------

def test_c05_reward_labeling():
    eps, rep = datastore.generate_demos(datastore.DemoConfig(ENV, 200, 0))
    bad = 0
    for e in eps:
        want = np.zeros(len(e))
        if e.success:
            want[-min(3, len(e)):] = 1
        bad += int(not np.array_equal(e.rewards, want))
    ok = bad == 0
    report(5, ok, f"{len(eps)} episodes ({rep['success_clean'] + rep['success_perturbed']} "
                  f"successful), {bad} mislabeled")
    assert ok


# --- 6 ---------------------------------------------------------------------------

def test_c06_value_map_direction(models, model_dir):
    _, eps = datastore.read_dataset(model_dir / "demos.bin")
    clean = [e for e in eps[:CLEAN_DEMOS]]
    _, obs, acts, _ = training.chunk_arrays(clean, models.norm, models.flow.H)
    rng = np.random.default_rng(6)
    idx = rng.choice(len(obs), 2000, replace=False)
    o, a = obs[idx], acts[idx]
    rand = rng.uniform(-1, 1, a.shape).astype(np.float32)
    qe = valuehead.critic_values(models.ensemble.online, o, a.reshape(len(a), -1)).min(0)
    qr = valuehead.critic_values(models.ensemble.online, o, rand.reshape(len(a), -1)).min(0)
    d = qe - qr
    boots = np.array([d[rng.integers(0, len(d), len(d))].mean() for _ in range(2000)])
    lo = float(np.quantile(boots, 0.01))
    ok = lo > 0
    report(6, ok, f"mean Q expert {qe.mean():.3f} vs random {qr.mean():.3f}, "
                  f"99% one-sided bootstrap lower bound of difference {lo:.3f}")
    assert ok


# --- 7 ---------------------------------------------------------------------------

def test_c07_best_of_n():
    rng = np.random.default_rng(7)
    mismatches = 0
    for _ in range(10_000):
        n = int(rng.integers(1, 11))
        # small integer values make ties common
        vals = rng.integers(-3, 4, n).astype(float)
        cs = flowhead.CandidateSet([flowhead.ActionChunk(np.zeros((1, 1)), 1.0)] * n)
        got = valuehead.select_best(cs, None, None, scorer=lambda o, c: vals)
        want = min(i for i in range(n) if vals[i] == vals.max())
        cs2 = flowhead.CandidateSet([flowhead.ActionChunk(np.zeros((1, 1)), 1.0)] * n)
        got2 = valuehead.select_best(cs2, None, None, scorer=lambda o, c: np.exp(vals) * 3 - 1)
        mismatches += int(got != want) + int(got2 != got)
    ok = mismatches == 0
    report(7, ok, f"10000 candidate sets, {mismatches} disagreements with exhaustive argmax "
                  f"or under exp transform")
    assert ok


# --- 8 ---------------------------------------------------------------------------

def test_c08_oracle_ablation(models):
    t = time.time()
    m = runtime.PolicyModels(models.norm, models.s2, models.s1, models.ensemble, models.flow,
                             models.s1_config, toolkit.OracleScorer(models.norm, ENV, models.flow.H))
    rows = {r.mode: r for r in toolkit.run_ablation(m, ENV, ["full", "random_select"], EPISODES,
                                                    EVAL_SEED)}
    f, r = rows["full"], rows["random_select"]
    dt = time.time() - t
    ok = toolkit.intervals_separated(f, r) and dt < 15 * 60
    report(8, ok, f"oracle full {f.rate:.1%} [{f.low:.3f},{f.high:.3f}] vs random_select "
                  f"{r.rate:.1%} [{r.low:.3f},{r.high:.3f}], {EPISODES} episodes, {dt:.0f}s")
    assert ok


# --- 9 ---------------------------------------------------------------------------

def test_c09_learned_ablation(learned_rows):
    rows = learned_rows
    for mode, r in rows.items():
        print(f"  {mode:14s} {r.rate:.1%} [{r.low:.3f}, {r.high:.3f}]")
    f, nc, ns, rs = (rows[k] for k in ("full", "no_cascade", "no_system1", "random_select"))
    order = f.rate >= nc.rate >= ns.rate
    print(f"  reported: full >= no_cascade >= no_system1 holds: {order}")
    ok = toolkit.intervals_separated(f, rs)
    report(9, ok, f"learned full {f.rate:.1%} vs random_select {rs.rate:.1%}, "
                  f"Wilson intervals {'separated' if ok else 'overlap'}")
    assert ok


# --- 10 --------------------------------------------------------------------------

def test_c10_segmentation_and_schedule():
    chunk = flowhead.ActionChunk(np.random.default_rng(0).normal(size=(30, 2)), 0.8)
    subs = cascade.segment(chunk, 15)
    back = cascade.concatenate(subs)
    rep = runtime.simulate_schedule(runtime.ScheduleConfig(s2_latency_ms=200.0), 10_000)
    period = runtime.ScheduleConfig().s2_period_ms
    ok = (len(subs) == 2 and np.array_equal(back.values, chunk.values)
          and rep.starved_ticks == 0 and rep.max_staleness_ms <= period + 1e-6)
    report(10, ok, f"K={len(subs)}, round trip exact, 4/6/90 Hz at 200 ms latency: "
                   f"starved {rep.starved_ticks}, max staleness {rep.max_staleness_ms:.1f} ms "
                   f"(<= {period:.0f})")
    assert ok


# --- 11 --------------------------------------------------------------------------

def test_c11_rollout_determinism(model_dir, tmp_path):
    out = tmp_path / "out"
    # copied, not linked: the CLI refuses paths that resolve outside --out
    shutil.copytree(model_dir, out / "models")
    outs = []
    for i in range(2):
        r = subprocess.run([sys.executable, "-m", "dualsys.cli", "--out", str(out), "rollout",
                            "--episode-seed", "123", "--trace", f"run{i}.txt"],
                           capture_output=True, text=True)
        assert r.returncode == 0, r.stderr
        outs.append((out / f"run{i}.txt").read_bytes())
    ok = outs[0] == outs[1] and len(outs[0]) > 0
    report(11, ok, f"two CLI rollouts, {len(outs[0])} bytes each, identical: {outs[0] == outs[1]}")
    assert ok


# --- 12 --------------------------------------------------------------------------

def test_c12_format_round_trips(tmp_path):
    eps, _ = datastore.generate_demos(datastore.DemoConfig(ENV, 20, 3))
    p = datastore.write_dataset(eps, tmp_path / "d.bin", ENV)
    raw = p.read_bytes()
    _, back = datastore.read_dataset(p)
    same_data = datastore.dataset_to_bytes(back, ENV) == raw and all(
        a.observations.tobytes() == b.observations.tobytes()
        and a.actions.tobytes() == b.actions.tobytes() for a, b in zip(eps, back))
    params = nnet.init_mlp([5, 7, 3], np.random.default_rng(0))
    nnet.save_params(params, tmp_path / "p.bin")
    praw = (tmp_path / "p.bin").read_bytes()
    back_p = nnet.load_params(tmp_path / "p.bin")
    same_params = nnet.params_to_bytes(back_p) == praw and all(
        x.tobytes() == y.tobytes() for x, y in zip(params.tensors(), back_p.tensors()))
    offsets = []
    for blob, parse in ((raw, datastore.dataset_from_bytes), (praw, nnet.params_from_bytes)):
        try:
            parse(b"\x00" + blob[1:])
            offsets.append(None)
        except FormatError as e:
            offsets.append(e.offset)
    ok = same_data and same_params and offsets == [0, 0]
    report(12, ok, f"dataset bit-exact {same_data}, checkpoint bit-exact {same_params}, "
                   f"corrupt-magic offsets {offsets}")
    assert ok
