"""PPI and PPI++ point estimates of a question mean."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .stats import PairedStats, UndefinedStatisticError, cov_from_sums, var_from_sums

# relative threshold on Var(S) below which the LLM column is treated as constant
DEGENERATE_VAR_REL = 1e-12


class NoDataError(ValueError):
    pass


@dataclass(frozen=True)
class EstimateReport:
    theta_hat: float
    lambda_used: float
    n_labeled: int
    synthetic_mean: float


def fit_lambda(stats: PairedStats, s_range: float | None = None) -> float:
    """Clipped regression coefficient of Y on S.

    ``s_range`` sets the scale of the degenerate-variance test; when omitted
    it is taken as the largest absolute shifted value implied by the sums,
    which is 0 for a constant column.
    """
    if stats.n < 2:
        raise UndefinedStatisticError("fit_lambda needs at least 2 pairs")
    return float(
        fit_lambda_arrays(stats.n, stats.dy, stats.ds, stats.dss, stats.dys, s_range)
    )


def fit_lambda_arrays(n, dy, ds, dss, dys, s_range=None):
    vs = var_from_sums(n, ds, dss)
    cv = cov_from_sums(n, dy, ds, dys)
    if s_range is None:
        # sqrt(mean square of shifted S) bounds the spread of the column
        s_range = np.sqrt(np.maximum(dss, 0.0) / n)
    tiny = DEGENERATE_VAR_REL * np.asarray(s_range, dtype=float) ** 2
    with np.errstate(divide="ignore", invalid="ignore"):
        ratio = np.where(vs > tiny, cv / np.where(vs > 0, vs, 1.0), 0.0)
    return np.clip(ratio, 0.0, 1.0)


def ppipp_estimate(labeled: PairedStats, synthetic_mean: float, lam: float) -> EstimateReport:
    if labeled.n < 1:
        raise NoDataError("no labeled pairs")
    if not 0.0 <= lam <= 1.0:
        raise ValueError(f"lambda must lie in [0, 1], got {lam}")
    if not math.isfinite(synthetic_mean):
        raise ValueError("synthetic mean must be finite")
    if lam == 0.0:
        theta = labeled.mean_y
    else:
        theta = labeled.mean_y + lam * (synthetic_mean - labeled.mean_s)
    return EstimateReport(theta, float(lam), labeled.n, float(synthetic_mean))


def ppi_estimate(labeled: PairedStats, synthetic_mean: float) -> EstimateReport:
    """Pool mean of the LLM plus the mean labeled residual."""
    return ppipp_estimate(labeled, synthetic_mean, 1.0)
