"""Online difficulty estimates shared across replications.

A learner keeps running moments for every (replication, component) cell and
exposes, per arm, the current difficulty estimate and its optimistic upper
bound.  All updates are elementwise on the touched cells, so a batch of
replications evolves exactly as each replication would on its own.
"""

from __future__ import annotations

import numpy as np

from .confidence import ConfidenceConfig, radius
from .estimators import fit_lambda_arrays
from .stats import tuned_var_from_sums


def radius_table(cfg: ConfidenceConfig, max_n: int) -> np.ndarray:
    """Radius for every count 0..max_n (infinite below 2)."""
    table = np.full(max_n + 1, np.inf)
    if max_n >= 2:
        table[2:] = radius(np.arange(2, max_n + 1), cfg)
    return table


class ArmLayout:
    """Maps arm-level quantities to component-level ones and back."""

    def __init__(self, membership, n_components: int):
        self.n_components = n_components
        if membership is None:
            self.identity = True
            self.n_arms = n_components
            self.arm_of = np.arange(n_components)
            return
        membership = np.asarray(membership)
        self.identity = False
        self.n_arms = membership.shape[0]
        if np.any(membership.sum(axis=0) != 1):
            raise ValueError("each component must belong to exactly one arm")
        self.arm_of = membership.argmax(axis=0)
        # components sorted by arm, for segment sums
        self.order = np.argsort(self.arm_of, kind="stable")
        sizes = np.bincount(self.arm_of, minlength=self.n_arms)
        self.starts = np.concatenate([[0], np.cumsum(sizes)[:-1]])
        self.members = [np.flatnonzero(self.arm_of == a) for a in range(self.n_arms)]
        self.max_size = int(sizes.max())
        pad = np.full((self.n_arms, self.max_size), -1)
        for a, m in enumerate(self.members):
            pad[a, : len(m)] = m
        self.padded = pad

    def arm_sum(self, comp_vals: np.ndarray) -> np.ndarray:
        """Sum component columns into arm columns (row-wise, batch-size invariant)."""
        if self.identity:
            return comp_vals
        return np.add.reduceat(comp_vals[:, self.order], self.starts, axis=1)

    def expand(self, rows: np.ndarray, arms: np.ndarray):
        """(row, component) pairs touched by drawing ``arms`` in ``rows``."""
        if self.identity:
            return rows, arms
        comps = self.padded[arms]  # (k, max_size)
        rr = np.repeat(rows, self.max_size)
        cc = comps.ravel()
        keep = cc >= 0
        return rr[keep], cc[keep]


class MeanLearner:
    """Tracks paired moments and the (tuned) residual variance per component."""

    def __init__(self, env, keys, cfg: ConfidenceConfig, tuned: bool = True, max_n: int = 2):
        self.env = env
        self.keys = np.asarray(keys, dtype=np.uint64)
        self.tuned = tuned
        self.layout = ArmLayout(env.membership, env.n_components)
        reps = len(self.keys)
        shape = (reps, env.n_components)
        self.n = np.zeros(shape, dtype=np.int64)
        self.shift_y = np.zeros(shape)
        self.shift_s = np.zeros(shape)
        self.dy = np.zeros(shape)
        self.ds = np.zeros(shape)
        self.dyy = np.zeros(shape)
        self.dss = np.zeros(shape)
        self.dys = np.zeros(shape)
        self.a_hat_comp = np.zeros(shape)
        self.lam = np.zeros(shape)
        self.s_range = np.broadcast_to(np.asarray(env.s_range(), dtype=float), (env.n_components,))
        self.rad = radius_table(cfg, max_n)

    def initialise(self, K: int):
        reps, Q = self.n.shape
        comps = np.arange(Q)[None, :]
        keys = self.keys[:, None]
        for j in range(K):
            y, s = self.env.draw(keys, comps, j)
            y = np.broadcast_to(y, (reps, Q))
            s = np.broadcast_to(s, (reps, Q))
            if j == 0:
                self.shift_y[:] = y
                self.shift_s[:] = s
            a = y - self.shift_y
            b = s - self.shift_s
            self.dy += a
            self.ds += b
            self.dyy += a * a
            self.dss += b * b
            self.dys += a * b
        self.n[:] = K
        rr, cc = np.indices((reps, Q))
        self._refresh(rr.ravel(), cc.ravel())

    def observe(self, rows, arms, j):
        rr, cc = self.layout.expand(rows, arms)
        jj = self.n[rr, cc]
        y, s = self.env.draw(self.keys[rr], cc, jj)
        a = y - self.shift_y[rr, cc]
        b = s - self.shift_s[rr, cc]
        self.dy[rr, cc] += a
        self.ds[rr, cc] += b
        self.dyy[rr, cc] += a * a
        self.dss[rr, cc] += b * b
        self.dys[rr, cc] += a * b
        self.n[rr, cc] += 1
        self._refresh(rr, cc)

    def _refresh(self, rr, cc):
        n = self.n[rr, cc]
        dy, ds = self.dy[rr, cc], self.ds[rr, cc]
        dss, dys = self.dss[rr, cc], self.dys[rr, cc]
        if self.tuned:
            lam = fit_lambda_arrays(n, dy, ds, dss, dys, self.s_range[cc])
        else:
            lam = np.ones(len(rr))
        self.lam[rr, cc] = lam
        self.a_hat_comp[rr, cc] = tuned_var_from_sums(n, dy, ds, self.dyy[rr, cc], dss, dys, lam)

    def a_hat(self, rows=None) -> np.ndarray:
        vals = self.a_hat_comp if rows is None else self.a_hat_comp[rows]
        return self.layout.arm_sum(vals)

    def a_ucb(self, rows=None) -> np.ndarray:
        a = self.a_hat_comp if rows is None else self.a_hat_comp[rows]
        n = self.n if rows is None else self.n[rows]
        ucb = (np.sqrt(a) + self.rad[n]) ** 2
        return self.layout.arm_sum(ucb)
