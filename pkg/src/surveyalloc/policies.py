"""Allocation policies and the sequential allocation loop.

Every policy answers the same question: given the label counts so far, which
arm gets the next human label?  The loop is written once, vectorised over a
batch of independent replications (``simulate_batch``); ``run_episode`` is the
single-replication view of the same code path, and ``select_next`` exposes a
single decision for callers that manage their own state.

Kinds:

``oracle``          deficit-following toward Neyman targets on the true difficulties
``uniform``         smallest count first
``epsilon_greedy``  decaying exploration, otherwise greedy on estimated difficulty
``etc``             uniform pilot, then deficit-following toward frozen targets
``ucb_ppi``         optimistic index on plain residual variance
``ucb_ppipp``       optimistic index on the tuned residual variance
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import streams
from .confidence import ConfidenceConfig, a_ucb
from .estimators import fit_lambda
from .stats import PairedStats, tuned_residual_variance

KINDS = ("oracle", "uniform", "epsilon_greedy", "etc", "ucb_ppi", "ucb_ppipp")
_LEARNING = {"epsilon_greedy", "etc", "ucb_ppi", "ucb_ppipp"}
_TOL = 1e-9


class ConfigurationError(ValueError):
    """Invalid experiment or policy configuration."""


@dataclass(frozen=True)
class PolicyConfig:
    kind: str
    K: int = 3
    epsilon_c: float = 5.0
    alpha: float = 0.3
    confidence: ConfidenceConfig = field(default_factory=ConfidenceConfig)
    label: str | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigurationError(f"unknown policy kind {self.kind!r}; expected one of {KINDS}")
        if self.K < 2:
            raise ConfigurationError("K must be at least 2")
        if not 0.0 < self.alpha < 1.0:
            raise ConfigurationError(f"alpha must lie in (0, 1), got {self.alpha}")
        if self.epsilon_c <= 0:
            raise ConfigurationError("epsilon_c must be positive")

    @property
    def name(self) -> str:
        if self.label:
            return self.label
        if self.kind == "etc":
            return f"etc({self.alpha:g})"
        return self.kind

    @property
    def tuned(self) -> bool:
        """Whether difficulty estimates use the fitted coefficient."""
        return self.kind != "ucb_ppi"


@dataclass
class AllocationState:
    n: np.ndarray
    budget: float
    costs: np.ndarray
    t: int = 0
    policy_key: np.uint64 = field(default_factory=lambda: streams.derive_key(0))
    targets: np.ndarray | None = None

    @property
    def spent(self) -> float:
        return float((self.n * self.costs).sum())

    @property
    def remaining(self) -> float:
        return self.budget - self.spent

    def record(self, q: int):
        if self.costs[q] > self.remaining + _TOL:
            raise ConfigurationError(f"arm {q} is not affordable")
        self.n[q] += 1
        self.t += 1


def neyman_allocation(A, w, c, B) -> np.ndarray:
    """Continuous variance-minimising counts ``B sqrt(wA/c) / sum sqrt(wAc)``."""
    A, w, c = (np.asarray(x, dtype=float) for x in (A, w, c))
    A, w, c = np.broadcast_arrays(A, w, c)
    if np.any(A <= 0) or np.any(w <= 0) or np.any(c <= 0) or B <= 0:
        raise ValueError("difficulties, weights, costs and budget must be positive")
    return B * np.sqrt(w * A / c) / np.sum(np.sqrt(w * A * c))


def largest_remainder(targets, c, B) -> np.ndarray:
    """Integer counts near ``targets`` with total cost at most ``B``."""
    targets = np.asarray(targets, dtype=float)
    c = np.broadcast_to(np.asarray(c, dtype=float), targets.shape)
    base = np.floor(targets).astype(int)
    left = B - base @ c
    for q in np.argsort(-(targets - base), kind="stable"):
        if c[q] <= left + _TOL:
            base[q] += 1
            left -= c[q]
    return base


def marginal_efficiency(w, A, c, n):
    """Variance reduction per unit cost of one more label, ``wA/(c n^2)``."""
    n = np.asarray(n, dtype=float)
    if np.any(n < 1):
        raise ValueError("marginal efficiency needs n >= 1")
    out = np.asarray(w, dtype=float) * np.asarray(A, dtype=float) / (np.asarray(c, dtype=float) * n * n)
    return float(out) if out.ndim == 0 else out


def _masked_argmax(score, mask):
    return np.where(mask, score, -np.inf).argmax(axis=1)


def _nth_true(mask, k):
    """Column of the k-th (0-based) True entry in each row."""
    return (np.cumsum(mask, axis=1) > k[:, None]).argmax(axis=1)


def choose(kind, n, remaining, w, c, *, a_hat=None, a_upper=None, targets=None,
           step=None, explore_u=None, pick_u=None, epsilon_c=5.0):
    """Vectorised decision rule for one step of each row.

    ``n`` is (rows, arms); ``remaining`` is (rows,).  ``step`` counts selection
    steps after initialisation, starting at 1 (epsilon-greedy only).  Ties go to
    the lowest index and unaffordable arms are never chosen.
    """
    n = np.asarray(n, dtype=float)
    afford = c[None, :] <= remaining[:, None] + _TOL
    if kind == "uniform":
        return _masked_argmax(-n, afford)
    if kind in ("oracle", "etc"):
        return _masked_argmax(targets - n, afford)
    if kind in ("ucb_ppi", "ucb_ppipp"):
        return _masked_argmax(w * a_upper / (c * n * n), afford)
    if kind == "epsilon_greedy":
        greedy = _masked_argmax(w * a_hat / (c * n * n), afford)
        eps = np.minimum(1.0, epsilon_c * n.shape[1] / np.asarray(step, dtype=float))
        explore = explore_u < eps
        if not explore.any():
            return greedy
        count = afford.sum(axis=1)
        k = np.minimum((pick_u * count).astype(np.int64), count - 1)
        return np.where(explore, _nth_true(afford, k), greedy)
    raise ConfigurationError(f"unknown policy kind {kind!r}")


def _as_vec(x, size, name):
    if x is None:
        return np.ones(size)
    x = np.asarray(x, dtype=float)
    if x.shape != (size,):
        raise ConfigurationError(f"{name} must have one entry per arm ({size})")
    if np.any(x <= 0):
        raise ConfigurationError(f"{name} must be positive")
    return x


def select_next(policy: PolicyConfig, state: AllocationState, stats, weights=None,
                true_A=None, s_range=None) -> int:
    """One decision for a single replication.

    ``stats`` holds one :class:`PairedStats` per arm.  ``true_A`` is needed by
    the oracle only.  ETC commits (stores ``state.targets``) on its first
    post-pilot call.
    """
    Q = len(state.n)
    w = _as_vec(weights, Q, "weights")
    c = state.costs
    kind = policy.kind
    n = state.n[None, :].astype(float)
    rem = np.array([state.remaining])
    if np.any(state.n < policy.K):
        raise ConfigurationError("initialisation phase is not complete")

    def estimates():
        a = np.empty(Q)
        for q, st in enumerate(stats):
            rng_q = None if s_range is None else s_range[q]
            lam = fit_lambda(st, rng_q) if policy.tuned else 1.0
            a[q] = tuned_residual_variance(st, lam)
        return a

    kw = {}
    if kind == "oracle":
        if true_A is None:
            raise ConfigurationError("the oracle needs the true difficulties")
        kw["targets"] = neyman_allocation(true_A, w, c, state.budget)[None, :]
    elif kind == "etc":
        init_cost = policy.K * c.sum()
        pilot = math.floor(policy.alpha * (state.budget - init_cost) + _TOL)
        if state.targets is None and state.spent - init_cost < pilot - _TOL:
            kind = "uniform"
        else:
            if state.targets is None:
                state.targets = neyman_allocation(np.maximum(estimates(), 1e-300), w, c, state.budget)
            kw["targets"] = state.targets[None, :]
    elif kind in ("ucb_ppi", "ucb_ppipp"):
        conf = policy.confidence.with_budget(state.budget, float(c.min()), Q)
        kw["a_upper"] = a_ucb(estimates(), state.n, conf)[None, :]
    elif kind == "epsilon_greedy":
        t = int(state.n.sum()) - policy.K * Q + 1
        kw["step"] = np.array([t])
        kw["a_hat"] = estimates()[None, :]
        kw["explore_u"] = streams.uniform(state.policy_key, 0, t, streams.LANE_EXPLORE)[None]
        kw["pick_u"] = streams.uniform(state.policy_key, 0, t, streams.LANE_PICK)[None]
        kw["epsilon_c"] = policy.epsilon_c
    return int(choose(kind, n, rem, w, c, **kw)[0])


@dataclass
class BatchResult:
    """Terminal state and trajectories of a batch of replications."""

    n: np.ndarray  # (reps, arms)
    spent: np.ndarray  # (reps,)
    mse: np.ndarray  # (reps,)
    checkpoints: np.ndarray  # (k,)
    trajectory: np.ndarray  # (reps, k)
    budget: float
    steps: int

    @property
    def remaining(self) -> np.ndarray:
        return self.budget - self.spent


def default_checkpoints(init_cost: float, budget: float, count: int = 100) -> np.ndarray:
    return np.linspace(init_cost, budget, count)


def make_learner(policy: PolicyConfig, env, keys, budget, c_min):
    """Difficulty learner for ``env`` (environments may supply their own)."""
    conf = policy.confidence.with_budget(budget, c_min, env.n_arms)
    max_n = int(math.floor(budget / c_min + _TOL)) + 1
    factory = getattr(env, "make_learner", None)
    if factory is not None:
        return factory(keys, conf, tuned=policy.tuned, max_n=max_n)
    from .learners import MeanLearner

    return MeanLearner(env, keys, conf, tuned=policy.tuned, max_n=max_n)


def simulate_batch(policy: PolicyConfig, env, budget: float, env_keys, policy_keys=None,
                   weights=None, costs=None, checkpoints=None) -> BatchResult:
    """Run one policy on ``len(env_keys)`` independent replications at once.

    Replication ``r`` draws its observations from stream ``env_keys[r]`` and
    its own randomness from ``policy_keys[r]``; the result for a replication
    does not depend on which other replications share the batch.
    """
    env_keys = np.asarray(env_keys, dtype=np.uint64).reshape(-1)
    reps = len(env_keys)
    policy_keys = env_keys if policy_keys is None else np.asarray(policy_keys, dtype=np.uint64)
    arms = env.n_arms
    w = _as_vec(weights, arms, "weights")
    c = _as_vec(costs, arms, "costs")
    A_true = np.asarray(env.arm_difficulty(), dtype=float)
    K = policy.K
    init_cost = float(K * c.sum())
    if budget < init_cost - _TOL:
        raise ConfigurationError(f"budget {budget} is below the initialisation cost {init_cost}")
    c_max = float(c.max())

    n = np.full((reps, arms), K, dtype=np.int64)
    spent = np.full(reps, init_cost)
    ck = default_checkpoints(init_cost, budget) if checkpoints is None else np.asarray(checkpoints, float)
    traj = np.full((reps, len(ck)), np.nan)
    ptr = np.zeros(reps, dtype=np.int64)

    def mse_of(rows):
        return (w * A_true / n[rows]).sum(axis=1)

    def record(rows, final=False):
        if len(ck) == 0 or len(rows) == 0:
            return
        rows = rows[ptr[rows] < len(ck)]
        if len(rows) == 0:
            return
        due = spent[rows] >= ck[ptr[rows]] - _TOL
        if final:
            due[:] = True
        rows = rows[due]
        if len(rows) == 0:
            return
        m = mse_of(rows)
        for r, val in zip(rows, m):
            lim = len(ck) if final else np.searchsorted(ck, spent[r] + _TOL, side="right")
            traj[r, ptr[r]:lim] = val
            ptr[r] = max(ptr[r], lim)

    learner = None
    if policy.kind in _LEARNING:
        learner = make_learner(policy, env, env_keys, budget, float(c.min()))
        learner.initialise(K)

    targets = None
    committed = np.zeros(reps, dtype=bool)
    if policy.kind == "oracle":
        targets = np.broadcast_to(neyman_allocation(A_true, w, c, budget), (reps, arms))
    elif policy.kind == "etc":
        targets = np.zeros((reps, arms))
        pilot = math.floor(policy.alpha * (budget - init_cost) + _TOL)

    all_rows = np.arange(reps)
    record(all_rows)
    steps = 0
    while True:
        active = budget - spent >= c_max - _TOL
        rows = np.flatnonzero(active)
        if len(rows) == 0:
            break
        steps += 1
        rem = budget - spent[rows]
        nr = n[rows]
        kind = policy.kind
        if kind == "etc":
            choice = np.empty(len(rows), dtype=np.int64)
            in_pilot = (~committed[rows]) & (spent[rows] - init_cost < pilot - _TOL)
            if in_pilot.any():
                choice[in_pilot] = choose("uniform", nr[in_pilot], rem[in_pilot], w, c)
            post = ~in_pilot
            if post.any():
                fresh = rows[post & ~committed[rows]]
                if len(fresh):
                    a = np.maximum(learner.a_hat(fresh), 1e-300)
                    targets[fresh] = budget * np.sqrt(w * a / c) / (np.sqrt(w * a * c)).sum(axis=1, keepdims=True)
                    committed[fresh] = True
                choice[post] = choose("etc", nr[post], rem[post], w, c, targets=targets[rows[post]])
        elif kind == "oracle":
            choice = choose(kind, nr, rem, w, c, targets=targets[rows])
        elif kind == "uniform":
            choice = choose(kind, nr, rem, w, c)
        elif kind == "epsilon_greedy":
            t = nr.sum(axis=1) - K * arms + 1
            pk = policy_keys[rows]
            choice = choose(kind, nr, rem, w, c, a_hat=learner.a_hat(rows), step=t,
                            explore_u=streams.uniform(pk, 0, t, streams.LANE_EXPLORE),
                            pick_u=streams.uniform(pk, 0, t, streams.LANE_PICK),
                            epsilon_c=policy.epsilon_c)
        else:
            choice = choose(kind, nr, rem, w, c, a_upper=learner.a_ucb(rows))
        if learner is not None:
            learner.observe(rows, choice, n[rows, choice])
        n[rows, choice] += 1
        spent[rows] = (n[rows] * c).sum(axis=1)
        record(rows)
    record(all_rows, final=True)
    return BatchResult(n=n, spent=spent, mse=mse_of(all_rows), checkpoints=ck,
                       trajectory=traj, budget=float(budget), steps=steps)


def run_episode(policy: PolicyConfig, env, budget: float, seed: int, weights=None,
                costs=None, checkpoints=None) -> BatchResult:
    """A single replication; identical to row 0 of a batch keyed the same way."""
    key = streams.derive_key(seed)
    return simulate_batch(policy, env, budget, [key], [key], weights, costs, checkpoints)
