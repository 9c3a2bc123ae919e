"""Log-log rate fits with replica-bootstrap confidence."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy import stats

__all__ = ["RateFit", "fit_rate"]


@dataclass(frozen=True)
class RateFit:
    log_eps: np.ndarray
    log_err: np.ndarray
    slope: float
    intercept: float
    residual: float
    halfwidth: float

    def lower(self) -> float:
        return self.slope - self.halfwidth


def _ols(x, y):
    A = np.column_stack([x, np.ones_like(x)])
    coef, *_ = np.linalg.lstsq(A, y, rcond=None)
    res = float(np.sqrt(np.mean((y - A @ coef) ** 2)))
    return float(coef[0]), float(coef[1]), res


def fit_rate(epsilons: Sequence[float], errors: Sequence[float] | None = None,
             replica_values: Sequence[np.ndarray] | None = None, n_boot: int = 2000,
             seed: int = 0, level: float = 0.95) -> RateFit:
    """Fit log|err| = slope log eps + intercept by least squares.

    With ``replica_values`` (one array of per-replica estimates per eps) the
    errors default to |mean| and the confidence half-width comes from
    resampling replicas within each eps.  Without them the half-width is
    the normal-theory OLS interval.
    """
    eps = np.asarray(epsilons, dtype=float)
    if eps.ndim != 1 or eps.size < 3:
        raise ValueError("need at least three points")
    if np.any(eps <= 0):
        raise ValueError("epsilon values must be positive")
    if errors is None:
        if replica_values is None:
            raise ValueError("need errors or replica values")
        errors = [abs(float(np.mean(v))) for v in replica_values]
    err = np.asarray(errors, dtype=float)
    if err.shape != eps.shape:
        raise ValueError("one error per epsilon")
    if np.any(~(err > 0)) or not np.isfinite(err).all():
        raise ValueError("errors must be positive and finite")
    x, y = np.log(eps), np.log(err)
    slope, intercept, res = _ols(x, y)
    if replica_values is not None:
        if len(replica_values) != eps.size:
            raise ValueError("one replica array per epsilon")
        rng = np.random.default_rng(seed)
        slopes = np.empty(n_boot)
        for b in range(n_boot):
            yb = np.empty(eps.size)
            for i, v in enumerate(replica_values):
                v = np.asarray(v, dtype=float)
                m = abs(v[rng.integers(0, v.size, v.size)].mean())
                yb[i] = np.log(max(m, 1e-300))
            slopes[b] = _ols(x, yb)[0]
        half = 0.5 * float(np.quantile(slopes, 0.5 + level / 2) - np.quantile(slopes, 0.5 - level / 2))
    else:
        sxx = float(np.sum((x - x.mean()) ** 2))
        s2 = float(np.sum((y - (slope * x + intercept)) ** 2)) / (eps.size - 2)
        half = float(stats.t.ppf(0.5 + level / 2, eps.size - 2) * np.sqrt(s2 / sxx)) if sxx > 0 else float("inf")
    return RateFit(x, y, slope, intercept, res, half)
