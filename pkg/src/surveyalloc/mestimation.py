"""Vector-valued targets: multinomial-logit partworths.

Each task shows K alternatives with features ``X`` (K x d).  A respondent
picks alternative k with probability softmax(X beta)_k.  The per-observation
loss is ``logsumexp(X theta) - X_y theta``; its score and Hessian are

    score   = sum_k p_k X_k - X_y
    hessian = sum_k p_k X_k X_k^T - (sum_k p_k X_k)(sum_k p_k X_k)^T

The difficulty of a task is a scalar summary (trace, or det^(1/d)) of the
sandwich covariance ``H^-1 V H^-1`` with ``V = Var(psi - lam psi_llm)``.
With a fixed design the score difference ``psi - lam psi_llm`` depends on the
plug-in parameter only through a constant shift, so ``V`` can be estimated
from the chosen feature rows alone; only ``H`` needs a parameter estimate.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.special import logsumexp
from scipy.stats import special_ortho_group

from . import streams
from .confidence import ConfidenceConfig
from .environments import mean_normaliser
from .learners import radius_table

CONDITION_LIMIT = 1e8


class ConditioningError(ValueError):
    """Hessian too ill-conditioned to invert."""


@dataclass(frozen=True)
class MnlTask:
    X: np.ndarray
    beta_star: np.ndarray
    beta_llm: np.ndarray
    s_scale: float = 1.0

    def __post_init__(self):
        X = np.asarray(self.X, dtype=float)
        if X.ndim != 2 or X.shape[0] < 2 or X.shape[1] < 1:
            raise ValueError("X must be K x d with K >= 2 and d >= 1")
        for b in (self.beta_star, self.beta_llm):
            if np.shape(b) != (X.shape[1],):
                raise ValueError("partworths must have length d")

    @property
    def K(self) -> int:
        return self.X.shape[0]

    @property
    def d(self) -> int:
        return self.X.shape[1]


def mnl_probs(X, beta) -> np.ndarray:
    """Choice probabilities; batched over leading axes of X and beta."""
    u = np.einsum("...kd,...d->...k", np.asarray(X, float), np.asarray(beta, float))
    return np.exp(u - logsumexp(u, axis=-1, keepdims=True))


def mnl_score(X, y: int, beta) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    if not 0 <= y < X.shape[0]:
        raise ValueError(f"choice index {y} out of range for K={X.shape[0]}")
    p = mnl_probs(X, beta)
    return p @ X - X[y]


def feature_covariance(X, p) -> np.ndarray:
    """Covariance of the chosen feature row when choices follow ``p`` (batched)."""
    m = np.einsum("...k,...kd->...d", p, X)
    second = np.einsum("...k,...kd,...ke->...de", p, X, X)
    return second - m[..., :, None] * m[..., None, :]


def mnl_hessian(X, beta) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return feature_covariance(X, mnl_probs(X, beta))


def expected_score(X, beta, beta_true) -> np.ndarray:
    """Score at ``beta`` averaged over choices drawn at ``beta_true``."""
    X = np.asarray(X, dtype=float)
    return (mnl_probs(X, beta) - mnl_probs(X, beta_true)) @ X


def _safe_inverse(H):
    if np.linalg.cond(H) > CONDITION_LIMIT:
        raise ConditioningError(f"Hessian condition number exceeds {CONDITION_LIMIT:g}")
    return np.linalg.inv(H)


def _scalarise(sigma, criterion):
    if criterion == "trace":
        return float(np.trace(sigma))
    if criterion == "det":
        d = sigma.shape[0]
        return float(max(np.linalg.det(sigma), 0.0) ** (1.0 / d))
    raise ValueError(f"unknown criterion {criterion!r}")


def optimal_lambda(task: MnlTask, cross=None) -> float:
    """Coefficient minimising the trace criterion, clipped to [0, 1].

    ``cross`` is Cov(psi, psi_llm); it is zero when LLM choices are drawn
    independently of human choices, which gives 0.
    """
    Hi = _safe_inverse(mnl_hessian(task.X, task.beta_star))
    VL = mnl_hessian(task.X, task.beta_llm)
    C = np.zeros_like(VL) if cross is None else np.asarray(cross, dtype=float)
    C = 0.5 * (C + C.T)
    den = np.trace(Hi @ VL @ Hi)
    if den <= 0:
        return 0.0
    return float(np.clip(np.trace(Hi @ C @ Hi) / den, 0.0, 1.0))


def exact_difficulty(task: MnlTask, lam: float | None = None, criterion: str = "trace") -> float:
    """Closed form for independent human and LLM draws.

    ``V = H(beta*) + lam^2 Cov_llm(X)``; ``lam=None`` uses the optimal value.
    """
    if lam is None:
        lam = optimal_lambda(task)
    H = mnl_hessian(task.X, task.beta_star)
    Hi = _safe_inverse(H)
    V = H + lam * lam * mnl_hessian(task.X, task.beta_llm)
    return _scalarise(Hi @ V @ Hi, criterion)


def sandwich_difficulty(task: MnlTask, lam: float, mc_samples: int, rng: np.random.Generator,
                        criterion: str = "trace", coupled: bool = False) -> float:
    """Monte Carlo sandwich difficulty from paired choice draws.

    With ``coupled`` the two choices share one uniform (inverse-CDF coupling);
    otherwise they are independent.
    """
    if mc_samples < 1000:
        raise ValueError("mc_samples must be at least 1000")
    X = np.asarray(task.X, dtype=float)
    p = mnl_probs(X, task.beta_star)
    pl = mnl_probs(X, task.beta_llm)
    u = rng.random(mc_samples)
    ul = u if coupled else rng.random(mc_samples)
    y = _inverse_cdf(p, u)
    yl = _inverse_cdf(pl, ul)
    xbar = p @ X
    psi = xbar - X[y]
    psi_l = xbar - X[yl]
    V = np.cov((psi - lam * psi_l).T, ddof=1).reshape(task.d, task.d)
    Hi = _safe_inverse(feature_covariance(X, p))
    return _scalarise(Hi @ V @ Hi, criterion)


def _inverse_cdf(p, u):
    cdf = np.cumsum(p, axis=-1)
    return np.minimum((u[..., None] > cdf[..., :-1]).sum(axis=-1), p.shape[-1] - 1)


def balanced_design(K: int, d: int) -> np.ndarray:
    """K unit-norm rows in R^d whose columns sum to zero (d <= K - 1).

    For K=3, d=2 the rows are the vertices of an equilateral triangle.
    """
    if not 1 <= d <= K - 1:
        raise ValueError("balanced design needs 1 <= d <= K - 1")
    # orthonormal basis of the complement of the ones vector
    basis = np.linalg.qr(np.column_stack([np.ones(K), np.eye(K)[:, : K - 1]]))[0][:, 1:]
    basis = basis * np.sign(basis[0])  # fixed orientation
    D = basis[:, :d]
    return D / np.linalg.norm(D, axis=1, keepdims=True).mean()


@dataclass(frozen=True)
class MnlSpec:
    Q: int = 50
    K: int = 3
    d: int = 2
    h: float = 1.0
    rho: float = 0.7
    noise_sd: float = 0.3
    design_scale: float = 0.8
    scale_exponent: float = 0.8
    seed: int = 0


def generate_tasks(spec: MnlSpec) -> list[MnlTask]:
    """Rotated balanced designs scaled by ``design_scale * v**scale_exponent``."""
    rng = np.random.default_rng(spec.seed)
    if spec.h > 0:
        v = mean_normaliser(spec.h) * np.exp(rng.uniform(-spec.h, spec.h, spec.Q))
    else:
        v = np.ones(spec.Q)
    D = balanced_design(spec.K, spec.d)
    tasks = []
    for q in range(spec.Q):
        rot = special_ortho_group.rvs(spec.d, random_state=rng) if spec.d > 1 else np.eye(1)
        s = spec.design_scale * v[q] ** spec.scale_exponent
        b = rng.standard_normal(spec.d)
        b /= np.linalg.norm(b)
        bl = spec.rho * b + spec.noise_sd * rng.standard_normal(spec.d)
        tasks.append(MnlTask(X=s * D @ rot, beta_star=b, beta_llm=bl, s_scale=float(s)))
    return tasks


class MnlEnvironment:
    """Choice tasks as arms; one label is one (human, LLM) choice pair."""

    membership = None

    def __init__(self, tasks, lam: float | None = None, criterion: str = "trace"):
        self.tasks = list(tasks)
        self.lam = lam
        self.criterion = criterion
        self.n_components = len(self.tasks)
        self.X = np.stack([t.X for t in self.tasks])
        self.p_star = mnl_probs(self.X, np.stack([t.beta_star for t in self.tasks]))
        self.p_llm = mnl_probs(self.X, np.stack([t.beta_llm for t in self.tasks]))
        self._A = np.array([exact_difficulty(t, lam, criterion) for t in self.tasks])

    @property
    def n_arms(self) -> int:
        return self.n_components

    def arm_sizes(self):
        return np.ones(self.n_arms, dtype=int)

    def component_difficulty(self):
        return self._A.copy()

    def arm_difficulty(self):
        return self._A.copy()

    def draw(self, key, comp, j):
        comp = np.asarray(comp)
        u = streams.uniform(key, comp, j, streams.LANE_CHOICE_HUMAN)
        ul = streams.uniform(key, comp, j, streams.LANE_CHOICE_LLM)
        return _inverse_cdf(self.p_star[comp], u), _inverse_cdf(self.p_llm[comp], ul)

    def ranges(self) -> dict:
        """Bound on the standardised score difference, from the true Hessians."""
        Hs = feature_covariance(self.X, self.p_star)
        inv_norm = max(np.linalg.norm(np.linalg.inv(H), 2) for H in Hs)
        row = float(np.linalg.norm(self.X, axis=2).max())
        return dict(R=2.0 * row * inv_norm)

    def make_learner(self, keys, cfg: ConfidenceConfig, tuned: bool = True, max_n: int = 2):
        return MnlLearner(self, keys, cfg, tuned=tuned and self.lam is None,
                          lam=1.0 if self.lam is None else self.lam, max_n=max_n)


class MnlLearner:
    """Online sandwich-trace estimate per (replication, task).

    Tracks human choice counts and first/second moments of the chosen human
    and LLM feature rows.  The plug-in parameter is the maximum-likelihood fit
    to the human counts (each smoothed by 1/2), refreshed by a few warm-started
    Newton steps whenever the task is sampled.
    """

    newton_steps = 4

    def __init__(self, env: MnlEnvironment, keys, cfg: ConfidenceConfig, tuned=True, lam=1.0, max_n=2):
        self.env = env
        self.keys = np.asarray(keys, dtype=np.uint64)
        self.tuned = tuned
        self.lam_fixed = lam
        reps, Q = len(self.keys), env.n_components
        K, d = env.X.shape[1:]
        self.counts = np.zeros((reps, Q, K))
        self.n = np.zeros((reps, Q), dtype=np.int64)
        self.sx = np.zeros((reps, Q, d))  # sums of human rows
        self.sl = np.zeros((reps, Q, d))  # sums of LLM rows
        self.sxx = np.zeros((reps, Q, d, d))
        self.sll = np.zeros((reps, Q, d, d))
        self.sxl = np.zeros((reps, Q, d, d))
        self.theta = np.zeros((reps, Q, d))
        self.a_hat_comp = np.zeros((reps, Q))
        self.rad = radius_table(cfg, max_n)

    def initialise(self, K0: int):
        reps, Q = self.n.shape
        rr, cc = np.indices((reps, Q))
        rr, cc = rr.ravel(), cc.ravel()
        for _ in range(K0):
            self._add(rr, cc)
        self._refresh(rr, cc)

    def observe(self, rows, arms, j):
        self._add(rows, arms)
        self._refresh(rows, arms)

    def _add(self, rr, cc):
        y, yl = self.env.draw(self.keys[rr], cc, self.n[rr, cc])
        x = self.env.X[cc, y]
        xl = self.env.X[cc, yl]
        self.counts[rr, cc, y] += 1
        self.sx[rr, cc] += x
        self.sl[rr, cc] += xl
        self.sxx[rr, cc] += x[:, :, None] * x[:, None, :]
        self.sll[rr, cc] += xl[:, :, None] * xl[:, None, :]
        self.sxl[rr, cc] += x[:, :, None] * xl[:, None, :]
        self.n[rr, cc] += 1

    def _refresh(self, rr, cc):
        X = self.env.X[cc]
        counts = self.counts[rr, cc] + 0.5
        total = counts.sum(axis=1)
        theta = self.theta[rr, cc]
        target = np.einsum("rk,rkd->rd", counts, X) / total[:, None]
        for _ in range(self.newton_steps):
            p = mnl_probs(X, theta)
            grad = np.einsum("rk,rkd->rd", p, X) - target
            H = feature_covariance(X, p)
            theta = theta - np.linalg.solve(H, grad[..., None])[..., 0]
        self.theta[rr, cc] = theta
        H = feature_covariance(X, mnl_probs(X, theta))
        Hi = np.linalg.inv(H)

        n = self.n[rr, cc][:, None, None].astype(float)
        sx, sl = self.sx[rr, cc], self.sl[rr, cc]
        Vxx = (self.sxx[rr, cc] - sx[:, :, None] * sx[:, None, :] / n) / (n - 1)
        Vll = (self.sll[rr, cc] - sl[:, :, None] * sl[:, None, :] / n) / (n - 1)
        Cxl = (self.sxl[rr, cc] - sx[:, :, None] * sl[:, None, :] / n) / (n - 1)
        Cxl = 0.5 * (Cxl + np.swapaxes(Cxl, 1, 2))

        def tr_sand(M):
            return np.einsum("rij,rjk,rki->r", Hi, M, Hi)

        if self.tuned:
            den = tr_sand(Vll)
            with np.errstate(divide="ignore", invalid="ignore"):
                lam = np.where(den > 1e-12, tr_sand(Cxl) / den, 0.0)
            lam = np.clip(lam, 0.0, 1.0)
        else:
            lam = np.full(len(rr), self.lam_fixed)
        # psi - lam psi_llm = -(x - lam xl) + const
        a = tr_sand(Vxx) - 2 * lam * tr_sand(Cxl) + lam * lam * tr_sand(Vll)
        self.a_hat_comp[rr, cc] = np.maximum(a, 0.0)

    def a_hat(self, rows=None):
        return self.a_hat_comp if rows is None else self.a_hat_comp[rows]

    def a_ucb(self, rows=None):
        a = self.a_hat(rows)
        n = self.n if rows is None else self.n[rows]
        return (np.sqrt(a) + self.rad[n]) ** 2


def mnl_true_difficulties(tasks, lam=None, criterion="trace") -> np.ndarray:
    return np.array([exact_difficulty(t, lam, criterion) for t in tasks])


def run_mnl_experiment(config, seed: int = 0):
    """Run the MNL allocation comparison; see :func:`surveyalloc.harness.run_experiment`."""
    from .harness import ExperimentConfig, run_experiment

    if not isinstance(config, ExperimentConfig):
        config = ExperimentConfig.from_dict(config)
    if config.environment.get("kind") != "mnl":
        raise ValueError("run_mnl_experiment needs an mnl environment")
    return run_experiment(config.with_seed(seed) if seed is not None else config)


def theta_fit(X, counts, steps: int = 50) -> np.ndarray:
    """Maximum-likelihood partworths for one task from choice counts."""
    X = np.asarray(X, dtype=float)
    counts = np.asarray(counts, dtype=float)
    theta = np.zeros(X.shape[1])
    target = counts @ X / counts.sum()
    for _ in range(steps):
        p = mnl_probs(X, theta)
        grad = p @ X - target
        if math.sqrt(grad @ grad) < 1e-13:
            break
        theta = theta - np.linalg.solve(mnl_hessian(X, theta), grad)
    return theta
