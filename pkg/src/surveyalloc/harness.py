"""Monte Carlo experiments: configuration, replication, metrics and output.

Seed scheme.  With master seed ``m``, replication ``r`` at budget index ``b``
draws observations from stream ``derive_key(m, b, r)``; every policy and every
sweep value sees the same draws (common random numbers).  With
``common_random_numbers`` off, policy ``p`` uses ``derive_key(m, b, r, p + 1)``
instead.  Policy randomness (exploration) always comes from
``derive_key(m, b, r, POLICY_STREAM, p)``.  Each replication's outcome is a
pure function of its keys, so aggregates do not depend on execution order.
"""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, streams
from .confidence import ConfidenceConfig
from .environments import (
    DataError,
    ModuleEnvironment,
    ReplayEnvironment,
    SyntheticEnvironment,
    SyntheticSpec,
    dispersion_draw,
    disperse,
    replay_ingest,
    rescale_heterogeneity,
)
from .policies import ConfigurationError, PolicyConfig, simulate_batch

log = logging.getLogger(__name__)

POLICY_STREAM = 0x5EED
SWEEP_AXES = ("rho", "h", "a_weights", "a_costs", "alpha_etc")
RESULT_COLUMNS = ["policy", "budget", "sweep_value", "mean_mse", "se_mse", "gap_pct",
                  "mean_regret", "se_regret"]
TRAJECTORY_COLUMNS = ["policy", "budget_spent", "mean_mse", "se_mse"]


# -- metrics -------------------------------------------------------------------


def expected_mse(n, A, w=None) -> float | np.ndarray:
    """``sum_q w_q A_q / n_q`` (last axis); rejects zero counts."""
    n = np.asarray(n, dtype=float)
    if np.any(n <= 0):
        raise ValueError("expected MSE needs every count >= 1")
    A = np.asarray(A, dtype=float)
    w = np.ones_like(A) if w is None else np.asarray(w, dtype=float)
    out = (w * A / n).sum(axis=-1)
    return float(out) if np.ndim(out) == 0 else out


def oracle_mse(A, w, c, B) -> float:
    """Continuous Neyman optimum ``(sum sqrt(w A c))^2 / B``."""
    A, w, c = np.broadcast_arrays(*(np.asarray(x, dtype=float) for x in (A, w, c)))
    return float(np.sum(np.sqrt(w * A * c)) ** 2 / B)


def regret_slope(budgets, regrets) -> float:
    """OLS slope of log regret on log budget; nonpositive regrets are dropped."""
    budgets = np.asarray(budgets, dtype=float)
    regrets = np.asarray(regrets, dtype=float)
    keep = regrets > 0
    if not keep.all():
        log.warning("dropping %d nonpositive regret point(s) from the slope fit", int((~keep).sum()))
    if keep.sum() < 3:
        raise ValueError("need at least 3 budgets with positive regret")
    x = np.log(budgets[keep])
    y = np.log(regrets[keep])
    x = x - x.mean()
    return float((x * (y - y.mean())).sum() / (x * x).sum())


def standard_error(values) -> float:
    values = np.asarray(values, dtype=float)
    if len(values) < 2 or np.all(values == values[0]):
        return 0.0
    return float(values.std(ddof=1) / math.sqrt(len(values)))


# -- configuration -------------------------------------------------------------

_TOP_KEYS = {"name", "environment", "policies", "budgets", "replications", "seed", "K",
             "checkpoints", "confidence", "weights", "costs", "dispersion_seed", "sweep",
             "common_random_numbers"}
_ENV_KEYS = {
    "synthetic": {"kind", "Q", "h", "rho", "sigma_eta", "v_seed"},
    "replay": {"kind", "data", "modules", "level", "heterogeneity"},
    "module": {"kind", "data", "modules", "heterogeneity"},
    "mnl": {"kind", "Q", "K", "d", "h", "rho", "noise_sd", "design_scale", "scale_exponent",
            "task_seed", "lambda", "criterion"},
}
_POLICY_KEYS = {"kind", "label", "alpha", "epsilon_c", "K"}
_CONF_KEYS = {"delta", "R", "R_Y", "R_S", "M_Y", "M_S", "V_min_llm", "radius", "radius_scale"}
_SWEEP_KEYS = {"axis", "values"}


def _reject_unknown(d: dict, allowed: set, where: str):
    if not isinstance(d, dict):
        raise ConfigurationError(f"{where} must be an object")
    extra = sorted(set(d) - allowed)
    if extra:
        raise ConfigurationError(f"unknown key(s) in {where}: {', '.join(extra)}")


@dataclass(frozen=True)
class ExperimentConfig:
    environment: dict
    policies: tuple
    budgets: tuple
    replications: int = 200
    seed: int = 0
    K: int = 3
    checkpoints: object = 100
    confidence: dict = field(default_factory=dict)
    weights: object = None
    costs: object = None
    dispersion_seed: int = 0
    sweep: dict | None = None
    common_random_numbers: bool = True
    name: str = "experiment"

    def __post_init__(self):
        if self.replications < 1:
            raise ConfigurationError("replications must be >= 1")
        if not self.budgets or any(b <= 0 for b in self.budgets):
            raise ConfigurationError("budgets must be a nonempty list of positive numbers")
        if not self.policies:
            raise ConfigurationError("at least one policy is required")
        if isinstance(self.checkpoints, (list, tuple)):
            if list(self.checkpoints) != sorted(self.checkpoints):
                raise ConfigurationError("checkpoints must be sorted ascending")
        elif not (isinstance(self.checkpoints, int) and self.checkpoints >= 0):
            raise ConfigurationError("checkpoints must be a count or a sorted list")
        if self.sweep is not None:
            if self.sweep.get("axis") not in SWEEP_AXES:
                raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}")
            if not self.sweep.get("values"):
                raise ConfigurationError("sweep values must be a nonempty list")

    @classmethod
    def from_dict(cls, d: dict) -> ExperimentConfig:
        _reject_unknown(d, _TOP_KEYS, "config")
        for key in ("environment", "policies", "budgets"):
            if key not in d:
                raise ConfigurationError(f"config is missing {key!r}")
        env = dict(d["environment"])
        kind = env.get("kind")
        if kind not in _ENV_KEYS:
            raise ConfigurationError(f"environment kind must be one of {sorted(_ENV_KEYS)}")
        _reject_unknown(env, _ENV_KEYS[kind], "environment")
        if kind == "module":
            env.update(kind="replay", level="module")
        pols = []
        for p in d["policies"]:
            p = {"kind": p} if isinstance(p, str) else dict(p)
            _reject_unknown(p, _POLICY_KEYS, "policy")
            pols.append(p)
        conf = dict(d.get("confidence") or {})
        _reject_unknown(conf, _CONF_KEYS, "confidence")
        sweep = d.get("sweep")
        if sweep is not None:
            _reject_unknown(sweep, _SWEEP_KEYS, "sweep")
            sweep = {"axis": sweep.get("axis"), "values": list(sweep.get("values") or [])}
        ck = d.get("checkpoints", 100)
        return cls(
            environment=env,
            policies=tuple(pols),
            budgets=tuple(d["budgets"]),
            replications=int(d.get("replications", 200)),
            seed=int(d.get("seed", 0)),
            K=int(d.get("K", 3)),
            checkpoints=tuple(ck) if isinstance(ck, list) else ck,
            confidence=conf,
            weights=d.get("weights"),
            costs=d.get("costs"),
            dispersion_seed=int(d.get("dispersion_seed", 0)),
            sweep=sweep,
            common_random_numbers=bool(d.get("common_random_numbers", True)),
            name=str(d.get("name", "experiment")),
        )

    @classmethod
    def load(cls, path) -> ExperimentConfig:
        try:
            with open(path, encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ConfigurationError(f"{path}: invalid JSON ({exc})") from None
        env = raw.get("environment") if isinstance(raw, dict) else None
        if isinstance(env, dict):
            # data paths are relative to the config file
            base = Path(path).resolve().parent
            for key in ("data", "modules"):
                if isinstance(env.get(key), str) and not Path(env[key]).is_absolute():
                    env[key] = str(base / env[key])
        return cls.from_dict(raw)

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "environment": dict(self.environment),
            "policies": [dict(p) for p in self.policies],
            "budgets": list(self.budgets),
            "replications": self.replications,
            "seed": self.seed,
            "K": self.K,
            "checkpoints": list(self.checkpoints) if isinstance(self.checkpoints, tuple) else self.checkpoints,
            "confidence": dict(self.confidence),
            "weights": self.weights,
            "costs": self.costs,
            "dispersion_seed": self.dispersion_seed,
            "sweep": None if self.sweep is None else dict(self.sweep),
            "common_random_numbers": self.common_random_numbers,
        }

    def with_seed(self, seed: int) -> ExperimentConfig:
        return replace(self, seed=int(seed))

    def with_sweep(self, axis: str, values=None) -> ExperimentConfig:
        if values is None:
            values = DEFAULT_SWEEPS[axis]
        return replace(self, sweep={"axis": axis, "values": list(values)})


DEFAULT_SWEEPS = {
    "rho": [0.0, 0.3, 0.5, 0.7, 0.9],
    "h": [0.5, 1.0, 1.5, 2.0],
    "a_weights": [0.0, 0.25, 0.5, 0.75, 1.0],
    "a_costs": [0.0, 0.25, 0.5, 0.75, 1.0],
    "alpha_etc": [0.1, 0.2, 0.3, 0.4, 0.5],
}


# -- environments ----------------------------------------------------------------


class _EnvFactory:
    """Builds the environment for each sweep value, caching ingested data."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.spec = dict(cfg.environment)
        self.kind = self.spec["kind"]
        self._data = None
        self.base = self.build(None, None)

    def _replay_base(self):
        if self._data is None:
            path = self.spec.get("data")
            if not path:
                raise ConfigurationError("replay environment needs a 'data' path")
            try:
                self._data = replay_ingest(path, self.spec.get("modules"))
            except FileNotFoundError as exc:
                raise DataError(f"cannot read {exc.filename}") from None
        return self._data

    def build(self, axis, value):
        s = self.spec
        if self.kind == "synthetic":
            kw = dict(Q=int(s.get("Q", 100)), h=float(s.get("h", 2.0)), rho=float(s.get("rho", 0.7)),
                      sigma_eta=float(s.get("sigma_eta", 0.5)), seed=int(s.get("v_seed", 42)))
            if axis in ("rho", "h"):
                kw[axis] = float(value)
            return SyntheticEnvironment(SyntheticSpec(**kw))
        if self.kind == "replay":
            data = self._replay_base()
            env = ReplayEnvironment(data)
            h = s.get("heterogeneity")
            if axis == "h":
                h = value
            if h is not None:
                h = float(h)
                target = (np.full(data.Q, data.A.mean()) if h == 0
                          else rescale_heterogeneity(data.A, h))
                env = env.with_difficulty(target)
            if s.get("level", "question") == "module":
                if not data.module_of:
                    raise ConfigurationError("module-level replay needs a 'modules' map")
                env = ModuleEnvironment(env, [data.module_of[q] for q in data.question_ids])
            elif axis == "rho":
                raise ConfigurationError("the rho sweep applies to synthetic environments only")
            return env
        if self.kind == "mnl":
            from .mestimation import MnlEnvironment, MnlSpec, generate_tasks

            kw = dict(Q=int(s.get("Q", 50)), K=int(s.get("K", 3)), d=int(s.get("d", 2)),
                      h=float(s.get("h", 1.0)), rho=float(s.get("rho", 0.7)),
                      noise_sd=float(s.get("noise_sd", 0.3)),
                      design_scale=float(s.get("design_scale", 0.8)),
                      scale_exponent=float(s.get("scale_exponent", 0.8)),
                      seed=int(s.get("task_seed", 0)))
            if axis in ("rho", "h"):
                kw[axis] = float(value)
            lam = s.get("lambda")
            return MnlEnvironment(generate_tasks(MnlSpec(**kw)), None if lam is None else float(lam),
                                  s.get("criterion", "trace"))
        raise ConfigurationError(f"unknown environment kind {self.kind!r}")


def _resolve_vector(spec, arms, seed, name):
    if spec is None:
        return None
    if isinstance(spec, dict):
        _reject_unknown(spec, {"dispersion"}, name)
        return disperse(float(spec["dispersion"]), dispersion_draw(arms, seed))
    vec = np.asarray(spec, dtype=float)
    if vec.shape != (arms,):
        raise ConfigurationError(f"{name} must list one value per arm ({arms})")
    return vec


def confidence_for(cfg: ExperimentConfig, base_env) -> ConfidenceConfig:
    """Confidence settings: environment defaults overridden by the config.

    Range defaults come from the unswept environment so they stay fixed
    across a sweep.
    """
    kw = dict(base_env.ranges())
    kw.update(cfg.confidence)
    if "delta" in cfg.confidence and cfg.confidence["delta"] is not None:
        kw["budget_delta"] = False
    elif "delta" in kw:
        kw.pop("delta")
    try:
        return ConfidenceConfig(**kw)
    except (TypeError, ValueError) as exc:
        raise ConfigurationError(f"confidence: {exc}") from None


def build_policies(cfg: ExperimentConfig, conf: ConfidenceConfig) -> list[PolicyConfig]:
    out = []
    for p in cfg.policies:
        kw = dict(p)
        kw.setdefault("K", cfg.K)
        try:
            out.append(PolicyConfig(confidence=conf, **kw))
        except TypeError as exc:
            raise ConfigurationError(f"policy {p}: {exc}") from None
    names = [p.name for p in out]
    if len(set(names)) != len(names):
        raise ConfigurationError(f"policy names must be distinct: {names}")
    return out


# -- running -----------------------------------------------------------------------


@dataclass
class ResultRow:
    policy: str
    budget: float
    sweep_value: object
    mean_mse: float
    se_mse: float
    oracle_mse: float
    mean_regret: float
    se_regret: float

    @property
    def gap_pct(self) -> float:
        return (self.mean_mse - self.oracle_mse) / self.oracle_mse * 100.0


@dataclass
class Trajectory:
    policy: str
    budget: float
    sweep_value: object
    budget_spent: np.ndarray
    mean_mse: np.ndarray
    se_mse: np.ndarray


@dataclass
class ExperimentResult:
    config: ExperimentConfig
    rows: list
    trajectories: list
    terminal_counts: dict  # (policy, budget, sweep_value) -> (reps, arms) counts
    terminal_mse: dict  # same keys -> (reps,) expected MSE

    def row(self, policy, budget=None, sweep_value=None) -> ResultRow:
        for r in self.rows:
            if r.policy == policy and (budget is None or r.budget == budget) and \
                    (sweep_value is None or r.sweep_value == sweep_value):
                return r
        raise KeyError((policy, budget, sweep_value))


def replication_keys(cfg: ExperimentConfig, b_index: int, p_index: int, reps=None):
    reps = range(cfg.replications) if reps is None else reps
    if cfg.common_random_numbers:
        env = [streams.derive_key(cfg.seed, b_index, r) for r in reps]
    else:
        env = [streams.derive_key(cfg.seed, b_index, r, p_index + 1) for r in reps]
    pol = [streams.derive_key(cfg.seed, b_index, r, POLICY_STREAM, p_index) for r in reps]
    return np.array(env, dtype=np.uint64), np.array(pol, dtype=np.uint64)


def _checkpoints(cfg, init_cost, budget):
    if isinstance(cfg.checkpoints, tuple):
        return np.array([c for c in cfg.checkpoints if init_cost <= c <= budget], dtype=float)
    if cfg.checkpoints == 0:
        return np.zeros(0)
    return np.linspace(init_cost, budget, cfg.checkpoints)


def run_experiment(cfg: ExperimentConfig, reps_order=None) -> ExperimentResult:
    """Run every (sweep value, budget, policy) cell.

    ``reps_order`` optionally permutes the order in which replications are
    simulated; results are reassembled by replication index.
    """
    factory = _EnvFactory(cfg)
    conf = confidence_for(cfg, factory.base)
    policies = build_policies(cfg, conf)
    axis = cfg.sweep["axis"] if cfg.sweep else None
    values = cfg.sweep["values"] if cfg.sweep else [None]
    order = np.arange(cfg.replications) if reps_order is None else np.asarray(reps_order)
    if sorted(order.tolist()) != list(range(cfg.replications)):
        raise ConfigurationError("reps_order must be a permutation of the replications")

    rows, trajs, counts, mses = [], [], {}, {}
    cache = {}
    for value in values:
        env = factory.build(axis, value) if axis in ("rho", "h") else factory.base
        arms = env.n_arms
        w = _resolve_vector(cfg.weights, arms, cfg.dispersion_seed, "weights")
        c = _resolve_vector(cfg.costs, arms, cfg.dispersion_seed, "costs")
        if axis == "a_weights":
            w = disperse(float(value), dispersion_draw(arms, cfg.dispersion_seed))
        elif axis == "a_costs":
            c = disperse(float(value), dispersion_draw(arms, cfg.dispersion_seed))
        A = env.arm_difficulty()
        ww = np.ones(arms) if w is None else w
        cc = np.ones(arms) if c is None else c
        for b_index, B in enumerate(cfg.budgets):
            mse_star = oracle_mse(A, ww, cc, B)
            for p_index, pol in enumerate(policies):
                if axis == "alpha_etc" and pol.kind == "etc":
                    pol = replace(pol, alpha=float(value), label=pol.label)
                memo = (pol, b_index) if axis == "alpha_etc" else None
                try:
                    if memo is not None and memo in cache:
                        res = cache[memo]
                    else:
                        env_keys, pol_keys = replication_keys(cfg, b_index, p_index)
                        init_cost = pol.K * cc.sum()
                        res = simulate_batch(pol, env, B, env_keys[order], pol_keys[order], w, c,
                                             _checkpoints(cfg, init_cost, B))
                        inv = np.argsort(order)
                        res.n, res.mse, res.spent = res.n[inv], res.mse[inv], res.spent[inv]
                        res.trajectory = res.trajectory[inv]
                        if memo is not None:
                            cache[memo] = res
                except ConfigurationError as exc:
                    raise ConfigurationError(
                        f"policy {pol.name}, budget {B}, sweep value {value}: {exc}") from None
                name = "etc" if axis == "alpha_etc" and pol.kind == "etc" else pol.name
                key = (name, B, value)
                counts[key] = res.n
                mses[key] = res.mse
                se = standard_error(res.mse)
                rows.append(ResultRow(name, B, value, float(res.mse.mean()), se, mse_star,
                                      float(res.mse.mean() - mse_star), se))
                if len(res.checkpoints):
                    tr = res.trajectory
                    trajs.append(Trajectory(name, B, value, res.checkpoints, tr.mean(axis=0),
                                            tr.std(axis=0, ddof=1) / math.sqrt(len(tr))
                                            if len(tr) > 1 else np.zeros(tr.shape[1])))
    return ExperimentResult(cfg, rows, trajs, counts, mses)


# -- output ------------------------------------------------------------------------


def fmt(x) -> str:
    """Six significant digits; integers and labels pass through."""
    if x is None:
        return ""
    if isinstance(x, str):
        return x
    if isinstance(x, (int, np.integer)) and not isinstance(x, bool):
        return str(int(x))
    x = float(x)
    if x.is_integer() and abs(x) < 1e15:
        return str(int(x))
    return f"{x:.6g}"


def results_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(RESULT_COLUMNS)
    for r in result.rows:
        wr.writerow([r.policy, fmt(r.budget), fmt(r.sweep_value), fmt(r.mean_mse), fmt(r.se_mse),
                     fmt(r.gap_pct), fmt(r.mean_regret), fmt(r.se_regret)])
    return buf.getvalue()


def _trajectory_subset(result: ExperimentResult):
    """Trajectories at the largest budget of the first sweep value."""
    if not result.trajectories:
        return []
    first = result.trajectories[0].sweep_value
    top = max(result.config.budgets)
    return [t for t in result.trajectories if t.sweep_value == first and t.budget == top]


def trajectory_csv(result: ExperimentResult) -> str:
    buf = io.StringIO()
    wr = csv.writer(buf, lineterminator="\n")
    wr.writerow(TRAJECTORY_COLUMNS)
    for t in _trajectory_subset(result):
        for b, m, s in zip(t.budget_spent, t.mean_mse, t.se_mse):
            wr.writerow([t.policy, fmt(b), fmt(m), fmt(s)])
    return buf.getvalue()


def summary_json(result: ExperimentResult) -> str:
    payload = {
        "version": f"v{__version__}",
        "config": result.config.to_dict(),
        "results": [
            {"policy": r.policy, "budget": fmt(r.budget), "sweep_value": fmt(r.sweep_value),
             "mean_mse": fmt(r.mean_mse), "se_mse": fmt(r.se_mse), "gap_pct": fmt(r.gap_pct),
             "mean_regret": fmt(r.mean_regret), "se_regret": fmt(r.se_regret),
             "oracle_mse": fmt(r.oracle_mse)}
            for r in result.rows
        ],
        "trajectories": [
            {"policy": t.policy, "budget": fmt(t.budget),
             "budget_spent": [fmt(x) for x in t.budget_spent],
             "mean_mse": [fmt(x) for x in t.mean_mse], "se_mse": [fmt(x) for x in t.se_mse]}
            for t in _trajectory_subset(result)
        ],
    }
    return json.dumps(payload, indent=2, sort_keys=True) + "\n"


def emit_results(result: ExperimentResult, out_dir, stem: str | None = None) -> dict:
    """Write ``<stem>.csv``, ``<stem>_trajectory.csv`` and ``<stem>.json``."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    stem = stem or result.config.name
    paths = {
        "results": out_dir / f"{stem}.csv",
        "trajectory": out_dir / f"{stem}_trajectory.csv",
        "summary": out_dir / f"{stem}.json",
    }
    paths["results"].write_text(results_csv(result), encoding="utf-8")
    paths["trajectory"].write_text(trajectory_csv(result), encoding="utf-8")
    paths["summary"].write_text(summary_json(result), encoding="utf-8")
    return paths
