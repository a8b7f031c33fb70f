"""Run configuration, model directories, PCA value maps and the ablation harness."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields, replace
from pathlib import Path

import numpy as np
from scipy import stats

from . import cascade, envsim, flowhead, nnet, runtime, training, valuehead
from .datastore import DemoConfig, NormStats
from .errors import ConfigError, DegenerateRankError, FrozenViolationError, MissingArtifactError

CONFIG_VERSION = 1
MANIFEST_VERSION = 1


# --- configuration -----------------------------------------------------------

_SECTIONS = {
    "flow": flowhead.FlowConfig,
    "s1": cascade.S1Config,
    "value": valuehead.ValueTrainConfig,
    "schedule": runtime.ScheduleConfig,
    "budget": training.StageBudget,
    "demo": DemoConfig,
}


def _build(cls, d: dict, where: str):
    known = {f.name for f in fields(cls)}
    extra = set(d) - known
    if extra:
        raise ConfigError(f"unknown keys in {where}: {sorted(extra)}")
    kw = {}
    for k, v in d.items():
        kw[k] = tuple(v) if isinstance(v, list) else v
    try:
        return cls(**kw)
    except (TypeError, ValueError) as e:
        raise ConfigError(f"bad {where}: {e}") from None


@dataclass(frozen=True)
class RunConfig:
    version: int = CONFIG_VERSION
    env_id: str = "pusht_lite"
    seed: int = 0
    eval_seed: int = 10_000
    episodes: int = 200
    mode: str = "full"
    modes: tuple = runtime.MODES
    dataset: str = "data/demos.bin"  # relative paths resolve under --out
    value_extra_data: str = ""  # optional second dataset seen only by train-value
    models: str = "models"
    flow: flowhead.FlowConfig = flowhead.FlowConfig()
    s1: cascade.S1Config = cascade.S1Config()
    value: valuehead.ValueTrainConfig = valuehead.ValueTrainConfig()
    schedule: runtime.ScheduleConfig = runtime.ScheduleConfig()
    budget: training.StageBudget = training.StageBudget()
    demo: DemoConfig = DemoConfig()

    def validate(self) -> "RunConfig":
        if self.version != CONFIG_VERSION:
            raise ConfigError(f"config version {self.version} unsupported (expected {CONFIG_VERSION})")
        if self.env_id not in envsim.ENV_IDS:
            raise ConfigError(f"unknown env id {self.env_id!r}")
        for m in (self.mode, *self.modes):
            if m not in runtime.MODES:
                raise ConfigError(f"unknown mode {m!r}; expected one of {runtime.MODES}")
        if self.episodes < 1:
            raise ConfigError("episodes must be >= 1")
        self.flow.validate()
        self.s1.validate(self.flow.H)
        self.schedule.validate()
        self.value.validate()
        if self.schedule.h != self.s1.h:
            raise ConfigError(f"schedule h={self.schedule.h} differs from refiner h={self.s1.h}")
        if self.demo.env_id != self.env_id:
            raise ConfigError(f"demo env {self.demo.env_id!r} differs from run env {self.env_id!r}")
        if self.flow.act_dim != envsim.ACTION_DIM:
            raise ConfigError(f"act_dim must be {envsim.ACTION_DIM}")
        return self

    def to_dict(self) -> dict:
        d = asdict(self)
        d["modes"] = list(self.modes)
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "RunConfig":
        if not isinstance(d, dict):
            raise ConfigError("config must be a JSON object")
        if "version" not in d:
            raise ConfigError("config has no 'version' field")
        top = {f.name for f in fields(cls)}
        extra = set(d) - top
        if extra:
            raise ConfigError(f"unknown config keys: {sorted(extra)}")
        kw = {}
        for k, v in d.items():
            if k in _SECTIONS:
                if not isinstance(v, dict):
                    raise ConfigError(f"section {k!r} must be an object")
                kw[k] = _build(_SECTIONS[k], v, k)
            elif k == "modes":
                kw[k] = tuple(v)
            else:
                kw[k] = v
        if "demo" not in kw and "env_id" in kw:
            kw["demo"] = DemoConfig(env_id=kw["env_id"])
        try:
            cfg = cls(**kw)
        except (TypeError, ValueError) as e:
            raise ConfigError(f"bad config: {e}") from None
        return cfg.validate()

    @classmethod
    def load(cls, path) -> "RunConfig":
        path = Path(path)
        if not path.exists():
            raise MissingArtifactError(f"config file {path} not found")
        try:
            d = json.loads(path.read_text(encoding="utf-8"))
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: invalid JSON ({e})") from None
        return cls.from_dict(d)

    def with_env(self, env_id: str) -> "RunConfig":
        return replace(self, env_id=env_id, demo=replace(self.demo, env_id=env_id))


# --- model directory ---------------------------------------------------------

ROLE_FILES = {
    "s2": "s2_field.bin",
    "s1": "s1_field.bin",
    "critic0": "critic0.bin",
    "critic1": "critic1.bin",
    "target0": "target0.bin",
    "target1": "target1.bin",
    "actor": "actor.bin",
}


def _manifest_path(model_dir) -> Path:
    return Path(model_dir) / "manifest.json"


def read_manifest(model_dir) -> dict:
    p = _manifest_path(model_dir)
    if not p.exists():
        raise MissingArtifactError(f"no model manifest at {p}")
    return json.loads(p.read_text(encoding="utf-8"))


def write_manifest(model_dir, manifest: dict) -> Path:
    p = _manifest_path(model_dir)
    p.parent.mkdir(parents=True, exist_ok=True)
    p.write_text(json.dumps(manifest, indent=2, sort_keys=True), encoding="utf-8")
    return p


def save_role(model_dir, role: str, params: nnet.MlpParams, manifest: dict) -> dict:
    path = Path(model_dir) / ROLE_FILES[role]
    path.parent.mkdir(parents=True, exist_ok=True)
    nnet.save_params(params, path)
    manifest.setdefault("roles", {})[role] = {"file": ROLE_FILES[role],
                                              "checksum": nnet.checksum(params)}
    return manifest


def load_role(model_dir, role: str, manifest: dict | None = None) -> nnet.MlpParams:
    manifest = manifest or read_manifest(model_dir)
    entry = manifest.get("roles", {}).get(role)
    if entry is None:
        raise MissingArtifactError(f"model role {role!r} missing from {model_dir}")
    path = Path(model_dir) / entry["file"]
    if not path.exists():
        raise MissingArtifactError(f"checkpoint {path} missing")
    params = nnet.load_params(path)
    if nnet.checksum(params) != entry["checksum"]:
        if role == "s2":
            raise FrozenViolationError(f"System-2 checkpoint {path} changed after it was frozen")
        raise MissingArtifactError(f"checkpoint {path} does not match its manifest checksum")
    return params


def save_s2(model_dir, params, norm: NormStats, flow: flowhead.FlowConfig, env_id: str) -> dict:
    manifest = {"version": MANIFEST_VERSION, "env_id": env_id, "norm": norm.to_dict(),
                "flow": asdict(flow), "roles": {}}
    save_role(model_dir, "s2", params, manifest)
    manifest["s2_checksum"] = manifest["roles"]["s2"]["checksum"]
    write_manifest(model_dir, manifest)
    return manifest


def require_frozen_s2(model_dir):
    """Load the System-2 generator and confirm it still matches its frozen checksum."""
    manifest = read_manifest(model_dir)
    if "s2_checksum" not in manifest:
        raise MissingArtifactError("train-s2 has not been run: no System-2 checkpoint")
    params = load_role(model_dir, "s2", manifest)
    if nnet.checksum(params) != manifest["s2_checksum"]:
        raise FrozenViolationError("System-2 checkpoint differs from its frozen checksum")
    return params, manifest


def load_models(model_dir, need=("s2", "s1", "critics")) -> runtime.PolicyModels:
    manifest = read_manifest(model_dir)
    s2, _ = require_frozen_s2(model_dir)
    norm = NormStats.from_dict(manifest["norm"])
    flow = flowhead.FlowConfig(**{k: tuple(v) if isinstance(v, list) else v
                                  for k, v in manifest["flow"].items()})
    s1 = s1cfg = None
    if "s1" in need or "s1" in manifest.get("roles", {}):
        if "s1" in manifest.get("roles", {}):
            s1 = load_role(model_dir, "s1", manifest)
            s1cfg = cascade.S1Config(**{k: tuple(v) if isinstance(v, list) else v
                                        for k, v in manifest["s1_config"].items()})
        elif "s1" in need:
            raise MissingArtifactError("refiner checkpoint missing: run train-s1")
    ens = None
    if "critic0" in manifest.get("roles", {}):
        online = [load_role(model_dir, f"critic{i}", manifest) for i in range(2)]
        target = [load_role(model_dir, f"target{i}", manifest) for i in range(2)]
        ens = valuehead.CriticEnsemble(online, target)
    elif "critics" in need:
        raise MissingArtifactError("value checkpoint missing: run train-value")
    return runtime.PolicyModels(norm, s2, s1, ens, flow, s1cfg or cascade.S1Config())


# --- PCA ---------------------------------------------------------------------

def _sign_fix(v: np.ndarray) -> np.ndarray:
    i = int(np.argmax(np.abs(v)))
    return v if v[i] >= 0 else -v


def pca_fit(X, k: int = 2, tol: float = 1e-12, max_iter: int = 20_000, rank_tol: float = 1e-10):
    """Top-``k`` principal axes by power iteration with deflation.

    Returns ``(basis (k, F), variance ratios (k,), mean (F,))``. Each axis has
    its largest-magnitude entry positive.
    """
    X = np.asarray(X, dtype=np.float64)
    if X.ndim != 2:
        raise ValueError("pca_fit needs a 2-D matrix")
    n, d = X.shape
    if n < k or d < k:
        raise ValueError(f"need at least {k} rows and {k} columns, got {X.shape}")
    mean = X.mean(axis=0)
    Xc = X - mean
    C = Xc.T @ Xc / max(n - 1, 1)
    total = float(np.trace(C))
    basis, lams = [], []
    for comp in range(k):
        if total <= 0 or np.trace(C) <= rank_tol * max(total, 1e-300):
            raise DegenerateRankError(comp, k)
        # start from the column with the most energy so the iteration is deterministic
        v = C[:, int(np.argmax(np.sum(C * C, axis=0)))].copy()
        v /= np.linalg.norm(v)
        lam = 0.0
        for _ in range(max_iter):
            w = C @ v
            nw = np.linalg.norm(w)
            if nw == 0:
                break
            w /= nw
            lam_new = float(w @ C @ w)
            if np.linalg.norm(w - v) < tol or abs(lam_new - lam) < tol * max(abs(lam_new), 1.0) * 1e-3:
                v, lam = w, lam_new
                break
            v, lam = w, lam_new
        if lam <= rank_tol * total:
            raise DegenerateRankError(comp, k)
        v = _sign_fix(v)
        basis.append(v)
        lams.append(lam)
        C = C - lam * np.outer(v, v)
    B = np.array(basis)
    # re-orthonormalise against accumulated round-off
    q, _ = np.linalg.qr(B.T)
    q = np.array([_sign_fix(q[:, i] * np.sign(q[:, i] @ B[i])) for i in range(k)])
    return q, np.array(lams) / total, mean


def pca_project(X, basis, mean) -> np.ndarray:
    return (np.asarray(X, dtype=np.float64) - mean) @ np.asarray(basis).T


# --- value map export ----------------------------------------------------------

@dataclass
class ValueMapExport:
    candidate_points: np.ndarray  # (n, 2)
    candidate_q: np.ndarray
    gt_points: np.ndarray  # (m, 2)
    gt_q: np.ndarray
    basis: np.ndarray  # (2, F)
    mean: np.ndarray
    ratios: np.ndarray
    summary: dict = field(default_factory=dict)
    groups: list = field(default_factory=list)  # per-timestep mode: one dict per plan

    def to_dict(self) -> dict:
        d = {k: np.asarray(getattr(self, k)).tolist() for k in (
            "candidate_points", "candidate_q", "gt_points", "gt_q", "basis", "mean", "ratios")}
        d["summary"] = self.summary
        d["groups"] = self.groups
        d["version"] = 1
        return d

    @classmethod
    def from_dict(cls, d) -> "ValueMapExport":
        arr = {k: np.asarray(d[k], dtype=np.float64) for k in (
            "candidate_points", "candidate_q", "gt_points", "gt_q", "basis", "mean", "ratios")}
        for k in ("candidate_points", "gt_points"):
            arr[k] = arr[k].reshape(-1, 2)
        return cls(**arr, summary=d.get("summary", {}), groups=d.get("groups", []))


def write_valuemap(export: ValueMapExport, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps(export.to_dict()), encoding="utf-8")
    return path


def read_valuemap(path) -> ValueMapExport:
    return ValueMapExport.from_dict(json.loads(Path(path).read_text(encoding="utf-8")))


def _q(ens, obs, chunks):
    return valuehead.critic_values(ens.online, obs, chunks.reshape(len(chunks), -1)).min(axis=0)


def export_valuemap(gt_obs, gt_chunks, cand_obs, cand_chunks, ens: valuehead.CriticEnsemble,
                    path=None, rng=None, per_timestep: bool = False, group_size: int | None = None,
                    min_candidates: int = 100) -> ValueMapExport:
    """Project candidates and ground-truth chunks into one PCA plane and attach their values.

    All inputs are normalised: ``*_obs`` (n, F_obs), ``*_chunks`` (n, H, d).
    The summary compares mean Q of the ground-truth chunks with mean Q of
    uniform random chunks at the same observations.
    ``per_timestep`` additionally fits one plane per group of ``group_size``
    consecutive candidates (one plan) together with the ground-truth rows
    sharing that plan's index.
    """
    cand_chunks = np.asarray(cand_chunks, dtype=np.float32)
    gt_chunks = np.asarray(gt_chunks, dtype=np.float32)
    if len(cand_chunks) < min_candidates:
        raise ConfigError(f"value map needs >= {min_candidates} candidate chunks, got {len(cand_chunks)}")
    rng = rng if rng is not None else np.random.default_rng(0)
    cf = cand_chunks.reshape(len(cand_chunks), -1)
    gf = gt_chunks.reshape(len(gt_chunks), -1)
    basis, ratios, mean = pca_fit(np.concatenate([cf, gf]), 2)
    cq = _q(ens, cand_obs, cand_chunks)
    gq = _q(ens, gt_obs, gt_chunks)
    rand = rng.uniform(-1.0, 1.0, size=gt_chunks.shape).astype(np.float32)
    rq = _q(ens, gt_obs, rand)
    summary = {"gt_mean_q": float(gq.mean()), "random_mean_q": float(rq.mean()),
               "candidate_mean_q": float(cq.mean()), "n_candidates": len(cf), "n_gt": len(gf),
               "gt_above_random": bool(gq.mean() > rq.mean())}
    groups = []
    if per_timestep:
        if not group_size:
            raise ConfigError("per-timestep export needs the candidate group size")
        for g in range(len(cf) // group_size):
            rows = cf[g * group_size:(g + 1) * group_size]
            gt_rows = gf[g:g + 1] if g < len(gf) else gf[:0]
            data = np.concatenate([rows, gt_rows])
            try:
                b, r, m = pca_fit(data, 2)
            except (DegenerateRankError, ValueError):
                continue
            groups.append({"plan": g, "basis": b.tolist(), "ratios": r.tolist(),
                           "candidates": pca_project(rows, b, m).tolist(),
                           "gt": pca_project(gt_rows, b, m).tolist()})
    export = ValueMapExport(pca_project(cf, basis, mean), cq.astype(np.float64),
                            pca_project(gf, basis, mean), gq.astype(np.float64),
                            basis, mean, ratios, summary, groups)
    if path is not None:
        write_valuemap(export, path)
    return export


# --- ablation -----------------------------------------------------------------

def wilson_interval(successes: int, n: int, confidence: float = 0.95) -> tuple[float, float]:
    if n == 0:
        return 0.0, 1.0
    ci = stats.binomtest(int(successes), int(n)).proportion_ci(confidence, method="wilson")
    return float(ci.low), float(ci.high)


@dataclass
class AblationRow:
    mode: str
    episodes: int
    successes: int
    rate: float
    low: float
    high: float

    def as_dict(self):
        return asdict(self)


def intervals_separated(a: AblationRow, b: AblationRow) -> bool:
    """True when ``a`` is better than ``b`` with non-overlapping intervals."""
    return a.low > b.high


class OracleScorer:
    """Ground-truth chunk value from the simulator.

    Each candidate is executed open loop from the observed state and scored
    by the negative pose error it leaves behind (block-to-goal for
    pusht_lite, agent-to-goal for reach2d). Reaching success inside the
    chunk adds ``SUCCESS_BONUS``. Candidates that do not touch the block
    tie, and ties go to the lowest index, which is the fully denoised one.
    """

    SUCCESS_BONUS = 1e6

    def __init__(self, norm: NormStats, env_id: str, H: int):
        self.norm, self.env_id, self.H = norm, env_id, H

    def _error(self, st) -> float:
        if st.env_id == "reach2d":
            return float(np.linalg.norm(st.goal - st.agent))
        return envsim.pose_cost(st.block, st.goal)

    def chunk_value(self, obs, world_chunk) -> float:
        st = envsim.state_from_obs(self.env_id, obs)
        for a in world_chunk:
            st, _, done, ok = envsim.step(st, a)
            if ok:
                return self.SUCCESS_BONUS - self._error(st)
            if done:
                break
        return -self._error(st)

    def __call__(self, obs, chunks) -> np.ndarray:
        return np.array([self.chunk_value(obs, self.norm.denormalize_action(c, obs))
                         for c in np.asarray(chunks)])


def run_ablation(models: runtime.PolicyModels, env_id: str, modes, episodes: int,
                 seed0: int = 10_000, schedule: runtime.ScheduleConfig = runtime.ScheduleConfig(),
                 progress=None) -> list[AblationRow]:
    """Success rate and Wilson 95% interval per mode; every mode sees the same seeds."""
    rows = []
    for mode in modes:
        ok = 0
        for i in range(episodes):
            tr = runtime.rollout_episode(models, env_id, seed0 + i, schedule, mode)
            ok += int(tr.success)
        lo, hi = wilson_interval(ok, episodes)
        rows.append(AblationRow(mode, episodes, ok, ok / episodes, lo, hi))
        if progress:
            progress(rows[-1])
    return rows


def write_ablation(rows, path) -> Path:
    path = Path(path)
    path.write_text(json.dumps([r.as_dict() for r in rows], indent=2), encoding="utf-8")
    return path
