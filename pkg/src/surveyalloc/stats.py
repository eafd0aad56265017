"""Running sufficient statistics for paired (human, LLM) samples.

Sums are stored relative to a per-question shift (the first observation) so
that large constant offsets do not cancel catastrophically.  The moment
helpers at the bottom operate elementwise and accept floats or numpy arrays;
the batched simulation engine calls them directly on ``(reps, questions)``
arrays.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np


class UndefinedStatisticError(ValueError):
    """Raised when a statistic needs more samples than are available."""


@dataclass(frozen=True)
class PairedStats:
    n: int = 0
    shift_y: float = 0.0
    shift_s: float = 0.0
    dy: float = 0.0
    ds: float = 0.0
    dyy: float = 0.0
    dss: float = 0.0
    dys: float = 0.0

    # raw power sums, reconstructed from the shifted ones
    @property
    def sum_y(self) -> float:
        return self.dy + self.n * self.shift_y

    @property
    def sum_s(self) -> float:
        return self.ds + self.n * self.shift_s

    @property
    def sum_yy(self) -> float:
        k = self.shift_y
        return self.dyy + 2 * k * self.dy + self.n * k * k

    @property
    def sum_ss(self) -> float:
        k = self.shift_s
        return self.dss + 2 * k * self.ds + self.n * k * k

    @property
    def sum_ys(self) -> float:
        ky, ks = self.shift_y, self.shift_s
        return self.dys + ks * self.dy + ky * self.ds + self.n * ky * ks

    @property
    def mean_y(self) -> float:
        if self.n == 0:
            raise UndefinedStatisticError("mean of an empty sample")
        return self.shift_y + self.dy / self.n

    @property
    def mean_s(self) -> float:
        if self.n == 0:
            raise UndefinedStatisticError("mean of an empty sample")
        return self.shift_s + self.ds / self.n

    def update(self, y: float, s: float) -> PairedStats:
        y = float(y)
        s = float(s)
        if not (math.isfinite(y) and math.isfinite(s)):
            raise ValueError(f"non-finite pair ({y}, {s})")
        if self.n == 0:
            return PairedStats(n=1, shift_y=y, shift_s=s)
        a = y - self.shift_y
        b = s - self.shift_s
        return PairedStats(
            n=self.n + 1,
            shift_y=self.shift_y,
            shift_s=self.shift_s,
            dy=self.dy + a,
            ds=self.ds + b,
            dyy=self.dyy + a * a,
            dss=self.dss + b * b,
            dys=self.dys + a * b,
        )

    def merge(self, other: PairedStats) -> PairedStats:
        if other.n == 0:
            return self
        if self.n == 0:
            return other
        # re-express other's sums around our shift
        ey = other.shift_y - self.shift_y
        es = other.shift_s - self.shift_s
        m = other.n
        dy = other.dy + m * ey
        ds = other.ds + m * es
        dyy = other.dyy + 2 * ey * other.dy + m * ey * ey
        dss = other.dss + 2 * es * other.ds + m * es * es
        dys = other.dys + es * other.dy + ey * other.ds + m * ey * es
        return PairedStats(
            n=self.n + m,
            shift_y=self.shift_y,
            shift_s=self.shift_s,
            dy=self.dy + dy,
            ds=self.ds + ds,
            dyy=self.dyy + dyy,
            dss=self.dss + dss,
            dys=self.dys + dys,
        )

    @classmethod
    def from_pairs(cls, ys, ss) -> PairedStats:
        st = cls()
        for y, s in zip(ys, ss):
            st = st.update(y, s)
        return st


def update(stats: PairedStats, y: float, s: float) -> PairedStats:
    return stats.update(y, s)


def _require(n, k=2):
    if np.any(np.asarray(n) < k):
        raise UndefinedStatisticError(f"need at least {k} paired samples")


def sample_variance_y(stats: PairedStats) -> float:
    _require(stats.n)
    return float(var_from_sums(stats.n, stats.dy, stats.dyy))


def sample_variance_s(stats: PairedStats) -> float:
    _require(stats.n)
    return float(var_from_sums(stats.n, stats.ds, stats.dss))


def sample_cov(stats: PairedStats) -> float:
    _require(stats.n)
    return float(cov_from_sums(stats.n, stats.dy, stats.ds, stats.dys))


def tuned_residual_variance(stats: PairedStats, lam: float) -> float:
    """Unbiased sample variance of ``Y - lam * S``."""
    _require(stats.n)
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    return float(
        tuned_var_from_sums(stats.n, stats.dy, stats.ds, stats.dyy, stats.dss, stats.dys, lam)
    )


# -- elementwise helpers (scalars or arrays) ---------------------------------


def var_from_sums(n, d, dd):
    v = (dd - d * d / n) / (n - 1)
    return np.maximum(v, 0.0)


def cov_from_sums(n, dy, ds, dys):
    return (dys - dy * ds / n) / (n - 1)


def tuned_var_from_sums(n, dy, ds, dyy, dss, dys, lam):
    r = dy - lam * ds
    rr = dyy - 2.0 * lam * dys + lam * lam * dss
    v = (rr - r * r / n) / (n - 1)
    return np.maximum(v, 0.0)
