"""Confidence radii for the difficulty upper bounds.

Two radii are available:

* the empirical-Bernstein radius for the standard deviation of a bounded
  residual, ``R * sqrt(2 ln(2/d) / (n-1))``, used with plain or tuned residuals;
* the PPI++ radius, which adds a grid-discretisation term and a term for the
  uncertainty of the fitted coefficient.

All functions are elementwise in ``n``/``s`` so the simulation engine can call
them on whole arrays.  ``radius_scale`` multiplies the returned radius; it is
1 for the textbook bound and smaller in calibrated experiments.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, replace

import numpy as np

from .stats import UndefinedStatisticError


@dataclass(frozen=True)
class ConfidenceConfig:
    delta: float = 0.05
    R: float = 2.0
    R_Y: float = 1.0
    R_S: float = 1.0
    M_Y: float = 1.0
    M_S: float = 1.0
    V_min_llm: float = 0.01
    T_max: int = 1
    Q: int = 1
    radius: str = "ppi"  # "ppi" | "ppipp"
    radius_scale: float = 1.0
    budget_delta: bool = True  # with_budget replaces delta by B**-2

    def __post_init__(self):
        if not 0.0 < self.delta < 1.0:
            raise ValueError(f"delta must lie in (0, 1), got {self.delta}")
        if self.T_max < 1 or self.Q < 1:
            raise ValueError("T_max and Q must be positive")
        if min(self.R, self.R_Y, self.R_S, self.M_Y, self.M_S) < 0:
            raise ValueError("range parameters must be nonnegative")
        if self.radius not in ("ppi", "ppipp"):
            raise ValueError(f"unknown radius kind {self.radius!r}")
        if self.radius_scale < 0:
            raise ValueError("radius_scale must be nonnegative")

    @property
    def delta_qt(self) -> float:
        """Per-(question, sample size) confidence level."""
        return self.delta / (self.Q * self.T_max)

    def with_budget(self, budget: float, c_min: float, Q: int, delta: float | None = None):
        """Copy with the horizon set for a run.

        ``delta`` defaults to B**-2 when ``budget_delta`` is set, else to the
        configured value.
        """
        t_max = max(1, int(math.floor(budget / c_min + 1e-9)))
        if delta is None:
            delta = budget**-2.0 if self.budget_delta else self.delta
        d = delta
        return replace(self, T_max=t_max, Q=Q, delta=min(d, 0.5))

    @classmethod
    def for_unit_interval(cls, **kw) -> ConfidenceConfig:
        """Ranges for responses scaled to [0, 1]."""
        base = dict(R=2.0, R_Y=1.0, R_S=1.0, M_Y=1.0, M_S=1.0)
        base.update(kw)
        return cls(**base)


def _check_n(n):
    if np.any(np.asarray(n) < 2):
        raise UndefinedStatisticError("radius needs at least 2 samples")


def bernstein_radius(n, cfg: ConfidenceConfig, delta=None):
    """``R sqrt(2 ln(2/delta) / (n - 1))`` at the per-pair level by default."""
    _check_n(n)
    d = cfg.delta_qt if delta is None else delta
    return cfg.R * np.sqrt(2.0 * math.log(2.0 / d) / (np.asarray(n, dtype=float) - 1.0))


def a_ucb_ppi(a_hat, n, cfg: ConfidenceConfig):
    """Optimistic difficulty ``(sqrt(a_hat) + radius)**2``."""
    a_hat = np.asarray(a_hat, dtype=float)
    if np.any(a_hat < 0):
        raise ValueError("a_hat must be nonnegative")
    r = cfg.radius_scale * bernstein_radius(n, cfg)
    out = _inflate(a_hat, r)
    return float(out) if out.ndim == 0 else out


def _inflate(a_hat, r):
    # (sqrt(a) + r)^2 expanded, so that r = 0 returns a_hat exactly
    return a_hat + 2.0 * np.sqrt(a_hat) * r + r * r


def _g(s, delta):
    return np.sqrt(math.log(8.0 / delta) / (2.0 * np.asarray(s, dtype=float)))


def delta_a(s, delta, cfg: ConfidenceConfig):
    g = _g(s, delta)
    lin = 2 * cfg.M_Y * cfg.M_S + cfg.M_S * cfg.R_Y + cfg.M_Y * cfg.R_S
    return lin * g + cfg.R_Y * cfg.R_S * g * g


def delta_b(s, delta, cfg: ConfidenceConfig):
    g = _g(s, delta)
    return (cfg.M_S**2 + 2 * cfg.M_S * cfg.R_S) * g + cfg.R_S**2 * g * g


def delta_lambda(s, delta, cfg: ConfidenceConfig):
    """Width of the coefficient confidence band.

    Returns ``inf`` where the covariance-denominator precondition
    ``delta_b <= V_min / 2`` fails.
    """
    _check_n(s)
    vmin = cfg.V_min_llm
    da = delta_a(s, delta, cfg)
    db = delta_b(s, delta, cfg)
    width = (2.0 / vmin) * da + (4.0 * cfg.M_Y * cfg.M_S / vmin**2) * db
    out = np.where(db <= vmin / 2.0, width, np.inf)
    return float(out) if out.ndim == 0 else out


def rho_ppipp(s, cfg: ConfidenceConfig):
    """PPI++ radius: Bernstein term on a coefficient grid, grid slack, and the
    coefficient-uncertainty term (capped at R_S/2 since |lambda gap| <= 1)."""
    _check_n(s)
    d = cfg.delta_qt
    s = np.asarray(s, dtype=float)
    first = cfg.R * np.sqrt(2.0 * math.log(4.0 * (cfg.T_max + 1) / d) / (s - 1.0))
    second = math.sqrt(2.0) * cfg.R_S / cfg.T_max
    dl = np.minimum(delta_lambda(s, d / 2.0, cfg), 1.0)
    third = 0.5 * cfg.R_S * dl
    out = cfg.radius_scale * (first + second + third)
    return float(out) if np.ndim(out) == 0 else out


def radius(n, cfg: ConfidenceConfig):
    if cfg.radius == "ppipp":
        return rho_ppipp(n, cfg)
    return cfg.radius_scale * bernstein_radius(n, cfg)


def a_ucb(a_hat, n, cfg: ConfidenceConfig):
    out = _inflate(np.asarray(a_hat, dtype=float), radius(n, cfg))
    return float(out) if np.ndim(out) == 0 else out
