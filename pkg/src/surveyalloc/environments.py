"""Sources of paired (human, LLM) observations.

An environment exposes *arms* (what a policy allocates labels to) built from
*components* (the per-question paired streams).  For question-level problems
each arm is a single component; module-level problems group several questions
into one arm, and one label on the arm yields one pair for every member.

``draw(key, comp, j)`` returns the j-th pair of component ``comp`` in the
stream identified by ``key``; see :mod:`surveyalloc.streams`.
"""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import streams
from .estimators import fit_lambda_arrays
from .stats import tuned_var_from_sums

log = logging.getLogger(__name__)

# floor for dispersed weights/costs that clip to 0
DISPERSE_FLOOR = 0.05


class DataError(ValueError):
    """Malformed or unusable dataset."""


# -- synthetic Gaussian model -------------------------------------------------


@dataclass(frozen=True)
class SyntheticSpec:
    Q: int = 100
    h: float = 2.0
    rho: float = 0.7
    sigma_eta: float = 0.5
    seed: int = 42

    def __post_init__(self):
        if self.Q < 1:
            raise ValueError("Q must be positive")
        if self.h < 0:
            raise ValueError(f"heterogeneity h must be >= 0, got {self.h}")
        if not 0.0 <= self.rho <= 1.0:
            raise ValueError(f"rho must lie in [0, 1], got {self.rho}")
        if self.sigma_eta < 0:
            raise ValueError("sigma_eta must be >= 0")


def mean_normaliser(h: float) -> float:
    """h / sinh(h), with its limit 1 at h = 0."""
    if h < 1e-8:
        return 1.0
    return h / math.sinh(h)


def synthetic_draw_vq(spec: SyntheticSpec, rng=None) -> np.ndarray:
    """Per-question variance scales ``(h/sinh h) exp(U)``, ``U ~ U(-h, h)``.

    With no ``rng`` the draw comes from ``np.random.RandomState(spec.seed)``;
    the scales are drawn once per experiment and shared by all replications.
    """
    if spec.h < 0:
        raise ValueError("h must be >= 0")
    if spec.h == 0:
        return np.ones(spec.Q)
    if rng is None:
        rng = np.random.RandomState(spec.seed)
    u = rng.uniform(-spec.h, spec.h, spec.Q)
    return mean_normaliser(spec.h) * np.exp(u)


def loguniform_cv(h: float) -> float:
    """Population CV of ``exp(U)``, ``U ~ U(-h, h)``: sqrt(h coth h - 1)."""
    if h < 1e-8:
        return 0.0
    return math.sqrt(h / math.tanh(h) - 1.0)


class _Arms:
    """Arm/component bookkeeping shared by all environments."""

    membership: np.ndarray | None = None  # (arms, components) 0/1, None = identity

    @property
    def n_arms(self) -> int:
        return self.n_components if self.membership is None else self.membership.shape[0]

    def arm_sizes(self) -> np.ndarray:
        if self.membership is None:
            return np.ones(self.n_components, dtype=int)
        return self.membership.sum(axis=1).astype(int)

    def arm_difficulty(self) -> np.ndarray:
        A = self.component_difficulty()
        return A if self.membership is None else self.membership @ A


class SyntheticEnvironment(_Arms):
    """Bivariate Gaussian pairs with known difficulty ``v (1 - rho^2 + sigma^2)``."""

    def __init__(self, spec: SyntheticSpec, v: np.ndarray | None = None):
        self.spec = spec
        self.v = synthetic_draw_vq(spec) if v is None else np.asarray(v, dtype=float)
        if self.v.shape != (spec.Q,):
            raise ValueError("v must have one entry per question")
        self.n_components = spec.Q
        self._sqv = np.sqrt(self.v)
        self._a = spec.rho
        self._b = math.sqrt(1.0 - spec.rho**2)

    def component_difficulty(self) -> np.ndarray:
        s = self.spec
        return self.v * (1.0 - s.rho**2 + s.sigma_eta**2)

    def lambda_star(self) -> np.ndarray:
        return np.full(self.spec.Q, self.spec.rho)

    def synthetic_mean(self) -> np.ndarray:
        return np.zeros(self.spec.Q)

    def true_mean(self) -> np.ndarray:
        return np.zeros(self.spec.Q)

    def draw(self, key, comp, j):
        u = streams.normal(key, comp, j, streams.LANE_SIGNAL)
        e = streams.normal(key, comp, j, streams.LANE_LLM_NOISE)
        z = streams.normal(key, comp, j, streams.LANE_HUMAN_NOISE)
        sv = self._sqv[comp]
        s = sv * (self._a * u + self._b * e)
        y = sv * (u + self.spec.sigma_eta * z)
        return y, s

    def ranges(self) -> dict:
        """Heuristic ranges for the unbounded Gaussian model (6 sd of Y)."""
        vmax = float(self.v.max())
        r_y = 6.0 * math.sqrt(vmax * (1.0 + self.spec.sigma_eta**2))
        r_s = 6.0 * math.sqrt(vmax)
        return dict(R=r_y, R_Y=r_y, R_S=r_s, M_Y=r_y / 2, M_S=r_s / 2,
                    V_min_llm=float(self.v.min()))

    def s_range(self) -> np.ndarray:
        return 6.0 * self._sqv


def synthetic_sample_pair(spec: SyntheticSpec, q: int, rng: np.random.Generator, v=None):
    """One (y, s) draw for question ``q`` from a numpy Generator."""
    vq = synthetic_draw_vq(spec)[q] if v is None else v[q]
    u, e, z = rng.standard_normal(3)
    sv = math.sqrt(vq)
    s = sv * (spec.rho * u + math.sqrt(1.0 - spec.rho**2) * e)
    y = sv * (u + spec.sigma_eta * z)
    return y, s


# -- replay of paired survey data ---------------------------------------------


@dataclass
class ReplayDataset:
    question_ids: list
    human: list  # per-question arrays scaled to [0, 1]
    llm: list
    module_of: dict = field(default_factory=dict)
    excluded: dict = field(default_factory=dict)

    def __post_init__(self):
        self.A = np.empty(len(self.question_ids))
        self.lambda_star = np.empty(len(self.question_ids))
        for i, (y, s) in enumerate(zip(self.human, self.llm)):
            self.lambda_star[i], self.A[i] = full_sample_difficulty(y, s)

    @property
    def Q(self) -> int:
        return len(self.question_ids)

    def counts(self) -> np.ndarray:
        return np.array([len(y) for y in self.human])


def full_sample_difficulty(y, s) -> tuple[float, float]:
    """(lambda*, A) from the whole sample: clipped Cov/Var then tuned variance."""
    y = np.asarray(y, dtype=float)
    s = np.asarray(s, dtype=float)
    n = len(y)
    dy = y - y[0]
    ds = s - s[0]
    args = (n, dy.sum(), ds.sum(), (dy * dy).sum(), (ds * ds).sum(), (dy * ds).sum())
    if n < 2:
        return 0.0, math.nan  # undefined; bootstrap still works
    lam = float(fit_lambda_arrays(args[0], args[1], args[2], args[4], args[5], 1.0))
    A = float(tuned_var_from_sums(*args, lam))
    return lam, A


def replay_ingest(path, modules_path=None, min_difficulty: float = 1e-12) -> ReplayDataset:
    """Read ``question_id,respondent_id,human,llm`` rows.

    Each question is min-max scaled to [0, 1] using the range of both columns.
    Questions whose human column is constant raise; questions with zero
    difficulty (perfectly predicted) are excluded with a warning.
    """
    path = Path(path)
    rows: dict[str, tuple[list, list]] = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError(f"{path}: empty file")
        header = [h.strip() for h in header]
        expected = ["question_id", "respondent_id", "human", "llm"]
        if header != expected:
            raise DataError(f"{path}: header {header} != {expected}")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 4:
                raise DataError(f"{path}:{lineno}: expected 4 fields, got {len(rec)}")
            qid = rec[0].strip()
            try:
                y = float(rec[2])
                s = float(rec[3])
            except ValueError:
                raise DataError(f"{path}:{lineno}: non-numeric response in question {qid}") from None
            if not (math.isfinite(y) and math.isfinite(s)):
                raise DataError(f"{path}:{lineno}: non-finite response in question {qid}")
            ys, ss = rows.setdefault(qid, ([], []))
            ys.append(y)
            ss.append(s)
    if not rows:
        raise DataError(f"{path}: no data rows")

    ids, human, llm, excluded = [], [], [], {}
    for qid, (ys, ss) in rows.items():
        y = np.asarray(ys)
        s = np.asarray(ss)
        if np.ptp(y) == 0:
            raise DataError(f"question {qid}: human responses are constant")
        lo = min(y.min(), s.min())
        hi = max(y.max(), s.max())
        y = (y - lo) / (hi - lo)
        s = (s - lo) / (hi - lo)
        lam, A = full_sample_difficulty(y, s)
        if A <= min_difficulty:
            log.warning("question %s excluded: zero rectification difficulty", qid)
            excluded[qid] = "zero difficulty"
            continue
        ids.append(qid)
        human.append(y)
        llm.append(s)

    module_of = {}
    if modules_path is not None:
        module_of = read_module_map(modules_path)
        missing = [q for q in ids if q not in module_of]
        if missing:
            raise DataError(f"questions without a module label: {missing[:5]}")
    return ReplayDataset(ids, human, llm, module_of, excluded)


def read_module_map(path) -> dict:
    path = Path(path)
    out = {}
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        header = [h.strip() for h in next(reader, [])]
        if header != ["question_id", "module_id"]:
            raise DataError(f"{path}: header {header} != ['question_id', 'module_id']")
        for lineno, rec in enumerate(reader, start=2):
            if not rec:
                continue
            if len(rec) != 2:
                raise DataError(f"{path}:{lineno}: expected 2 fields")
            out[rec[0].strip()] = rec[1].strip()
    return out


class ReplayEnvironment(_Arms):
    """With-replacement bootstrap over each question's respondent pool.

    ``scale`` multiplies both columns of a question, which multiplies its
    difficulty by ``scale**2`` and leaves its coefficient unchanged.
    """

    def __init__(self, data: ReplayDataset, scale=None):
        if data.Q == 0:
            raise DataError("dataset has no usable questions")
        self.data = data
        self.n_components = data.Q
        self._counts = data.counts()
        self._offsets = np.concatenate([[0], np.cumsum(self._counts)[:-1]])
        self._y = np.concatenate(data.human)
        self._s = np.concatenate(data.llm)
        self.scale = np.ones(data.Q) if scale is None else np.asarray(scale, dtype=float)
        self._pool_mean = np.array([s.mean() for s in data.llm])
        self._human_mean = np.array([y.mean() for y in data.human])

    def with_difficulty(self, A_new) -> ReplayEnvironment:
        """Environment whose full-sample difficulties equal ``A_new``."""
        factor = np.sqrt(np.asarray(A_new, dtype=float) / self.data.A)
        return ReplayEnvironment(self.data, self.scale * factor)

    def component_difficulty(self) -> np.ndarray:
        return self.data.A * self.scale**2

    def lambda_star(self) -> np.ndarray:
        return self.data.lambda_star.copy()

    def synthetic_mean(self) -> np.ndarray:
        return self._pool_mean * self.scale

    def true_mean(self) -> np.ndarray:
        return self._human_mean * self.scale

    def draw(self, key, comp, j):
        comp = np.asarray(comp)
        row = self._offsets[comp] + streams.integers(key, comp, j, streams.LANE_ROW,
                                                     self._counts[comp])
        f = self.scale[comp]
        return self._y[row] * f, self._s[row] * f

    def ranges(self) -> dict:
        m = float(self.scale.max())
        return dict(R=2.0 * m, R_Y=m, R_S=m, M_Y=m, M_S=m, V_min_llm=0.01 * m * m)

    def s_range(self) -> np.ndarray:
        return self.scale.copy()


def replay_sample_pair(data: ReplayDataset, q: int, rng: np.random.Generator):
    i = rng.integers(len(data.human[q]))
    return float(data.human[q][i]), float(data.llm[q][i])


# -- experiment transforms -----------------------------------------------------


def rescale_heterogeneity(A, h: float) -> np.ndarray:
    """Scale log-difficulties about their mean by ``h``; keep the arithmetic mean."""
    A = np.asarray(A, dtype=float)
    if np.any(A <= 0):
        raise ValueError("difficulties must be positive")
    if h < 0:
        raise ValueError("h must be >= 0")
    logs = np.log(A)
    centre = logs.mean()
    out = np.exp(centre + h * (logs - centre))
    return out * (A.mean() / out.mean())


def dispersion_draw(Q: int, seed: int) -> np.ndarray:
    """The z_q ~ U(-1, 1) draw, fixed across dispersion levels."""
    return np.random.default_rng(seed).uniform(-1.0, 1.0, Q)


def disperse(a: float, z, floor: float = DISPERSE_FLOOR) -> np.ndarray:
    """``clip(1 + a z, 0, 2)`` floored at ``floor`` so the result stays positive."""
    if not 0.0 <= a <= 1.0:
        raise ValueError(f"dispersion a must lie in [0, 1], got {a}")
    vals = np.clip(1.0 + a * np.asarray(z, dtype=float), 0.0, 2.0)
    return np.maximum(vals, floor)


def group_modules(A, labels) -> tuple[list, np.ndarray, np.ndarray]:
    """Sum difficulties within modules.

    Returns ``(module_ids, A_module, membership)`` with ``membership`` an
    (modules, questions) 0/1 matrix.  Module order is first appearance.
    """
    A = np.asarray(A, dtype=float)
    labels = list(labels)
    if len(labels) != len(A):
        raise ValueError("one module label per question is required")
    if any(lab is None or lab == "" for lab in labels):
        raise ValueError("every question needs a module label")
    ids = list(dict.fromkeys(labels))
    pos = {m: i for i, m in enumerate(ids)}
    M = np.zeros((len(ids), len(A)))
    for q, lab in enumerate(labels):
        M[pos[lab], q] = 1.0
    return ids, M @ A, M


class ModuleEnvironment(_Arms):
    """Question environment regrouped into modules (one arm per module)."""

    def __init__(self, base, labels):
        self.base = base
        self.module_ids, _, self.membership = group_modules(base.component_difficulty(), labels)
        self.n_components = base.n_components

    def component_difficulty(self):
        return self.base.component_difficulty()

    def lambda_star(self):
        return self.base.lambda_star()

    def synthetic_mean(self):
        return self.base.synthetic_mean()

    def true_mean(self):
        return self.base.true_mean()

    def draw(self, key, comp, j):
        return self.base.draw(key, comp, j)

    def ranges(self):
        return self.base.ranges()

    def s_range(self):
        return self.base.s_range()
