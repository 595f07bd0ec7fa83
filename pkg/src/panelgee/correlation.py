"""Working correlation structures R(alpha) for unbalanced clusters.

AR(1) is a power correlation in calendar time: entry (j, k) is
``alpha ** |year_j - year_k|``, so skipped survey years widen the lag.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_factor, cho_solve

from .errors import CorrelationError

KINDS = ("independence", "exchangeable", "ar1")
# margin kept from the open validity interval when clamping estimates
CLAMP_EPS = 1e-6


@dataclass(frozen=True)
class WorkingCorrelation:
    kind: str
    alpha: float | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise CorrelationError(f"unknown working correlation {self.kind!r}")
        if self.kind == "independence":
            object.__setattr__(self, "alpha", None)
        elif self.alpha is None or not np.isfinite(self.alpha):
            raise CorrelationError(f"{self.kind} structure needs a finite alpha")


def alpha_bounds(kind: str, n_max: int) -> tuple[float, float]:
    """Open interval of alpha values giving an SPD matrix for clusters up to ``n_max``."""
    if kind == "exchangeable":
        if n_max <= 1:
            return (-np.inf, np.inf)
        return (-1.0 / (n_max - 1), 1.0)
    if kind == "ar1":
        return (-1.0, 1.0)
    raise CorrelationError(f"{kind!r} has no correlation parameter")


def clamp_alpha(kind: str, alpha: float, n_max: int, eps: float = CLAMP_EPS) -> tuple[float, bool]:
    """Pull ``alpha`` inside ``[lower + eps, upper - eps]``; returns (value, clamped)."""
    lo, hi = alpha_bounds(kind, n_max)
    if alpha < lo + eps:
        return lo + eps, True
    if alpha > hi - eps:
        return hi - eps, True
    return alpha, False


def _check(corr: WorkingCorrelation, n: int) -> None:
    if corr.kind == "independence" or n <= 1:
        return
    lo, hi = alpha_bounds(corr.kind, n)
    if not lo < corr.alpha < hi:
        raise CorrelationError(
            f"{corr.kind} alpha={corr.alpha!r} outside ({lo:.6g}, {hi:.6g}) for cluster size {n}"
        )


def _years(years) -> np.ndarray:
    years = np.asarray(years, dtype=np.int64).ravel()
    if years.size < 1:
        raise ValueError("need at least one time point")
    if np.any(np.diff(years) <= 0):
        raise ValueError("years must be strictly increasing")
    return years


def correlation_matrix(corr: WorkingCorrelation, years) -> np.ndarray:
    years = _years(years)
    n = years.size
    _check(corr, n)
    if corr.kind == "independence" or n == 1:
        return np.eye(n)
    if corr.kind == "exchangeable":
        R = np.full((n, n), float(corr.alpha))
        np.fill_diagonal(R, 1.0)
        return R
    lags = np.abs(years[:, None] - years[None, :])
    return float(corr.alpha) ** lags


def inverse_correlation(corr: WorkingCorrelation, years) -> np.ndarray:
    """Exact inverse of :func:`correlation_matrix`.

    Exchangeable and evenly spaced AR(1) use closed forms; AR(1) with
    irregular gaps falls back to a Cholesky solve.
    """
    years = _years(years)
    n = years.size
    _check(corr, n)
    if corr.kind == "independence" or n == 1:
        return np.eye(n)
    a = float(corr.alpha)
    if corr.kind == "exchangeable":
        c = a / (1.0 + (n - 1) * a)
        Rinv = np.full((n, n), -c / (1.0 - a))
        np.fill_diagonal(Rinv, (1.0 - c) / (1.0 - a))
        return Rinv
    gaps = np.diff(years)
    if np.all(gaps == gaps[0]):
        rho = a ** int(gaps[0])
        s = 1.0 / (1.0 - rho * rho)
        Rinv = np.zeros((n, n))
        idx = np.arange(n)
        Rinv[idx, idx] = (1.0 + rho * rho) * s
        Rinv[0, 0] = Rinv[-1, -1] = s
        Rinv[idx[:-1], idx[1:]] = -rho * s
        Rinv[idx[1:], idx[:-1]] = -rho * s
        return Rinv
    R = correlation_matrix(corr, years)
    return cho_solve(cho_factor(R, lower=True), np.eye(n))
