"""Command line: data generation, the two training stages, rollouts, ablations and exports.

Exit codes: 0 success, 2 configuration error, 3 missing artifact, 4 numeric failure.
Every file the CLI writes lands under ``--out``.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import datastore, envsim, nnet, runtime, toolkit, training
from .errors import (ConfigError, DegenerateRankError, FormatError, FrozenViolationError,
                     MissingArtifactError, NumericError, ShapeError, StartupError)

log = logging.getLogger("dualsys")

EXIT_OK, EXIT_CONFIG, EXIT_MISSING, EXIT_NUMERIC = 0, 2, 3, 4


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise ConfigError(message)


def _under(out: Path, rel: str) -> Path:
    """Resolve ``rel`` inside ``out``; refuse anything that escapes it."""
    p = (out / rel).resolve()
    root = out.resolve()
    if p != root and root not in p.parents:
        raise ConfigError(f"path {rel!r} resolves outside --out ({root})")
    return p


def _load_config(args) -> toolkit.RunConfig:
    cfg = toolkit.RunConfig.load(args.config) if args.config else toolkit.RunConfig()
    if args.seed is not None:
        cfg = replace(cfg, seed=args.seed, demo=replace(cfg.demo, seed=args.seed))
    if getattr(args, "env", None):
        cfg = cfg.with_env(args.env)
    return cfg.validate()


def _dump(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(obj, indent=2, sort_keys=True), encoding="utf-8")


# --- subcommands ---------------------------------------------------------------

def cmd_gen_data(cfg, out, args):
    demo = replace(cfg.demo, episodes=args.episodes or cfg.demo.episodes)
    eps, report = datastore.generate_demos(demo)
    path = _under(out, cfg.dataset)
    path.parent.mkdir(parents=True, exist_ok=True)
    datastore.write_dataset(eps, path, cfg.env_id)
    _dump(path.with_suffix(".report.json"), report)
    print(json.dumps(report))


def _read_data(cfg, out, rel=None):
    path = _under(out, rel or cfg.dataset)
    if not path.exists():
        raise MissingArtifactError(f"dataset {path} not found: run gen-data first")
    env_id, eps = datastore.read_dataset(path)
    if env_id != cfg.env_id:
        raise ConfigError(f"dataset is for {env_id!r} but the config says {cfg.env_id!r}")
    return eps


def cmd_train_s2(cfg, out, args):
    eps = _read_data(cfg, out)
    params, norm, losses = training.train_s2(eps, cfg.flow, cfg.budget, cfg.seed)
    mdir = _under(out, cfg.models)
    manifest = toolkit.save_s2(mdir, params, norm, cfg.flow, cfg.env_id)
    _dump(mdir / "s2_log.json", {"losses": losses})
    print(json.dumps({"s2_checksum": manifest["s2_checksum"], "final_loss": losses[-1][1]
                      if losses else None}))


def cmd_train_value(cfg, out, args):
    mdir = _under(out, cfg.models)
    s2, manifest = toolkit.require_frozen_s2(mdir)
    eps = _read_data(cfg, out)
    if cfg.value_extra_data:
        eps = eps + _read_data(cfg, out, cfg.value_extra_data)
    norm = datastore.NormStats.from_dict(manifest["norm"])
    learner, logs = training.train_value(eps, norm, s2, cfg.flow, cfg.value, cfg.budget, cfg.seed)
    # the generator must be untouched after value training
    toolkit.require_frozen_s2(mdir)
    for i in range(2):
        toolkit.save_role(mdir, f"critic{i}", learner.ensemble.online[i], manifest)
        toolkit.save_role(mdir, f"target{i}", learner.ensemble.target[i], manifest)
    toolkit.save_role(mdir, "actor", learner.actor.params, manifest)
    manifest["value_config"] = asdict(cfg.value)
    toolkit.write_manifest(mdir, manifest)
    _dump(mdir / "value_log.json", {"logs": logs})
    print(json.dumps({"final": logs[-1][1] if logs else None}))


def cmd_train_s1(cfg, out, args):
    mdir = _under(out, cfg.models)
    _, manifest = toolkit.require_frozen_s2(mdir)
    eps = _read_data(cfg, out)
    norm = datastore.NormStats.from_dict(manifest["norm"])
    params, losses = training.train_s1(eps, norm, cfg.s1, cfg.budget, cfg.seed, cfg.flow.act_dim)
    toolkit.require_frozen_s2(mdir)
    toolkit.save_role(mdir, "s1", params, manifest)
    manifest["s1_config"] = asdict(cfg.s1)
    toolkit.write_manifest(mdir, manifest)
    _dump(mdir / "s1_log.json", {"losses": losses})
    print(json.dumps({"final_loss": losses[-1][1] if losses else None}))


def _models(cfg, out, oracle=False):
    m = toolkit.load_models(_under(out, cfg.models))
    if oracle:
        m.scorer = toolkit.OracleScorer(m.norm, cfg.env_id, m.flow.H)
    return m


def cmd_rollout(cfg, out, args):
    models = _models(cfg, out, args.oracle)
    seed = cfg.eval_seed if args.episode_seed is None else args.episode_seed
    tr = runtime.rollout_episode(models, cfg.env_id, seed, cfg.schedule, cfg.mode)
    path = _under(out, args.trace or f"traces/rollout_{cfg.mode}_{seed}.txt")
    path.parent.mkdir(parents=True, exist_ok=True)
    runtime.write_rollout(tr, path)
    print(json.dumps({"success": tr.success, "ticks": tr.ticks, "trace": str(path)}))


def cmd_ablate(cfg, out, args):
    modes = args.modes.split(",") if args.modes else list(cfg.modes)
    for m in modes:
        if m not in runtime.MODES:
            raise ConfigError(f"unknown mode {m!r}")
    models = _models(cfg, out, args.oracle)
    n = args.episodes or cfg.episodes
    rows = toolkit.run_ablation(models, cfg.env_id, modes, n, cfg.eval_seed, cfg.schedule,
                                progress=lambda r: print(json.dumps(r.as_dict()), flush=True))
    name = "ablation_oracle.json" if args.oracle else "ablation.json"
    toolkit.write_ablation(rows, _under(out, name))


def cmd_export_valuemap(cfg, out, args):
    models = _models(cfg, out)
    eps = _read_data(cfg, out)
    b, gobs, gacts, _ = training.chunk_arrays(eps, models.norm, models.flow.H)
    rng = np.random.default_rng([cfg.seed, 5])
    take = rng.choice(len(gobs), size=min(args.gt, len(gobs)), replace=False)
    cobs, cchunks = [], []
    for i in range(args.plans):
        tr = runtime.rollout_episode(models, cfg.env_id, cfg.eval_seed + i, cfg.schedule, "full")
        for p in tr.plans:
            raw = p.chunks_world
            st_obs = _plan_obs(tr, p)
            nobs = models.norm.normalize_obs(st_obs)
            for c in raw:
                cobs.append(nobs)
                cchunks.append(models.norm.normalize_action(c, st_obs))
    exp = toolkit.export_valuemap(gobs[take], gacts[take], np.array(cobs), np.array(cchunks),
                                  models.ensemble, _under(out, "valuemap.json"), rng,
                                  per_timestep=args.per_timestep, group_size=models.flow.N)
    print(json.dumps(exp.summary))


def _plan_obs(trace, plan_rec):
    """Raw observation a plan was made from, rebuilt from the trace."""
    if plan_rec.tick == 0:
        _, o = envsim.reset(trace.env_id, trace.seed)
        return o
    _, x, y = trace.agent[plan_rec.tick - 1]
    st, _ = envsim.reset(trace.env_id, trace.seed)
    if trace.block:
        _, bx, by, bt = trace.block[plan_rec.tick - 1]
        st = envsim.EnvState(trace.env_id, np.array([x, y]), st.goal, np.array([bx, by, bt]))
    else:
        st = envsim.EnvState(trace.env_id, np.array([x, y]), st.goal)
    return envsim.observe(st)


def cmd_simulate_schedule(cfg, out, args):
    sched = replace(cfg.schedule, s2_latency_ms=args.latency) if args.latency is not None \
        else cfg.schedule
    rep = runtime.simulate_schedule(sched, args.ticks, cfg.flow.H // cfg.s1.h)
    summary = rep.summary()
    _dump(_under(out, "schedule_report.json"), summary)
    print(json.dumps(summary))


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train-s2": cmd_train_s2,
    "train-value": cmd_train_value,
    "train-s1": cmd_train_s1,
    "rollout": cmd_rollout,
    "ablate": cmd_ablate,
    "export-valuemap": cmd_export_valuemap,
    "simulate-schedule": cmd_simulate_schedule,
}


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dualsys", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="UTF-8 JSON run configuration")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True, help="output directory; nothing is written elsewhere")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)
    g = sub.add_parser("gen-data")
    g.add_argument("--episodes", type=int)
    g.add_argument("--env", choices=envsim.ENV_IDS)
    for name in ("train-s2", "train-value", "train-s1"):
        sub.add_parser(name)
    r = sub.add_parser("rollout")
    r.add_argument("--episode-seed", type=int)
    r.add_argument("--trace")
    r.add_argument("--oracle", action="store_true")
    a = sub.add_parser("ablate")
    a.add_argument("--modes")
    a.add_argument("--episodes", type=int)
    a.add_argument("--oracle", action="store_true")
    v = sub.add_parser("export-valuemap")
    v.add_argument("--plans", type=int, default=10, help="rollouts whose candidates are logged")
    v.add_argument("--gt", type=int, default=500, help="ground-truth chunks sampled")
    v.add_argument("--per-timestep", action="store_true")
    s = sub.add_parser("simulate-schedule")
    s.add_argument("--ticks", type=int, default=10_000)
    s.add_argument("--latency", type=float, help="planner latency override (ms)")
    return p


def main(argv=None) -> int:
    try:
        args = build_parser().parse_args(argv)
        logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING)
        cfg = _load_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        COMMANDS[args.command](cfg, out, args)
        return EXIT_OK
    except (ConfigError, ShapeError, StartupError, DegenerateRankError) as e:
        print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (MissingArtifactError, FrozenViolationError, FormatError) as e:
        print(f"missing or invalid artifact: {e}", file=sys.stderr)
        return EXIT_MISSING
    except NumericError as e:
        print(f"numeric failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
