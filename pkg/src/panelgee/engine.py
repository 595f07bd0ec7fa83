"""Log-link quasi-Poisson GEE fitted by modified Fisher scoring.

The mean model is ``mu = exp(X beta + offset)`` with variance function
``v(mu) = mu`` and free dispersion ``phi``. With ``Xt = diag(sqrt(mu)) X``
and Pearson residuals ``e = (y - mu) / sqrt(mu)``, each cluster contributes

    D' V^-1 D       = Xt' R^-1 Xt / phi
    D' V^-1 (y - mu) = Xt' R^-1 e  / phi

which is how the batched aggregation below is written.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, qr

from .correlation import WorkingCorrelation, clamp_alpha, inverse_correlation
from .errors import (
    ConvergenceError,
    DegenerateFitError,
    FitError,
    NonSPDError,
    RankDeficientError,
)
from .ingest import INTERCEPT, PanelDataset
from .modelspec import ModelSpec

logger = logging.getLogger(__name__)

_ETA_MAX = 700.0
_MAX_HALVINGS = 10


@dataclass(frozen=True, eq=False)
class FitResult:
    """Converged (or last-iterate) state of one GEE fit."""

    beta: np.ndarray
    alpha: float | None
    phi: float
    model_cov: np.ndarray
    robust_cov: np.ndarray
    n_iter: int
    converged: bool
    n_obs: int
    n_clusters: int
    p: int
    quasi_loglik: float
    terms: tuple[str, ...] = ()
    correlation: str = "exchangeable"
    alpha_clamped: bool = False
    model: str = "model"
    fingerprint: str = ""
    diagnostics: tuple[str, ...] = field(default_factory=tuple)

    @property
    def std_err(self) -> np.ndarray:
        """Robust (sandwich) standard errors."""
        return np.sqrt(np.diag(self.robust_cov))

    @property
    def model_std_err(self) -> np.ndarray:
        return np.sqrt(np.diag(self.model_cov))

    @property
    def working_correlation(self) -> WorkingCorrelation:
        if self.alpha is None:
            return WorkingCorrelation("independence")
        return WorkingCorrelation(self.correlation, self.alpha)


@dataclass(frozen=True, eq=False)
class ClusterWorkspace:
    """Per-cluster pieces of the estimating equation at a given beta."""

    mu: np.ndarray
    D: np.ndarray
    Vinv: np.ndarray


# ---------------------------------------------------------------------------
# basic quantities


def linear_predictor(data: PanelDataset, beta) -> np.ndarray:
    return data.X @ np.asarray(beta, dtype=float) + data.offset


def fitted_mean(data: PanelDataset, beta) -> np.ndarray:
    return np.exp(np.minimum(linear_predictor(data, beta), _ETA_MAX))


def _split(flat: np.ndarray, data: PanelDataset) -> list[np.ndarray]:
    return np.split(flat, np.cumsum(data.sizes)[:-1]) if data.n_clusters else []


def pearson_residuals(data: PanelDataset, beta) -> list[np.ndarray]:
    """``(y - mu) / sqrt(mu)`` for each cluster."""
    mu = fitted_mean(data, beta)
    return _split((data.y - mu) / np.sqrt(mu), data)


def estimate_phi(residuals, n_obs: int, p: int) -> float:
    """Moment estimator ``sum(e^2) / (N - p)``."""
    if n_obs <= p:
        raise DegenerateFitError(f"need more observations than parameters (N={n_obs}, p={p})")
    e = np.concatenate([np.ravel(r) for r in residuals]) if len(residuals) else np.empty(0)
    return float(np.dot(e, e) / (n_obs - p))


def estimate_alpha(residuals, p: int, phi: float, kind: str, years=None):
    """Moment estimate of the working-correlation parameter.

    Parameters
    ----------
    residuals : sequence of arrays
        Pearson residuals per cluster.
    p : int
        Number of regression parameters (denominator correction).
    phi : float
        Dispersion.
    kind : {"exchangeable", "ar1"}
    years : sequence of arrays, optional
        Calendar years per cluster; required for ``"ar1"``, whose moment
        uses only pairs exactly one year apart.

    Returns
    -------
    alpha : float
        Estimate clamped into the validity interval for the largest cluster.
    clamped : bool
        Whether clamping changed the raw estimate.
    """
    if kind == "independence":
        raise ValueError("independence structure has no correlation parameter")
    if not phi > 0:
        raise DegenerateFitError(f"dispersion must be positive, got {phi!r}")
    sizes = [len(r) for r in residuals]
    n_max = max(sizes, default=0)
    if n_max < 2:
        raise DegenerateFitError("no cluster has two or more observations")
    if kind == "exchangeable":
        total = 0.0
        npairs = 0
        for r in residuals:
            r = np.asarray(r, dtype=float)
            s = r.sum()
            total += 0.5 * (s * s - np.dot(r, r))
            npairs += len(r) * (len(r) - 1) // 2
    elif kind == "ar1":
        if years is None:
            raise ValueError("ar1 moment estimate needs the years of each cluster")
        total = 0.0
        npairs = 0
        for r, yr in zip(residuals, years):
            r = np.asarray(r, dtype=float)
            adjacent = np.diff(np.asarray(yr)) == 1
            total += float(np.dot(r[:-1][adjacent], r[1:][adjacent]))
            npairs += int(adjacent.sum())
        if npairs == 0:
            raise DegenerateFitError("no pairs of consecutive years for the ar1 moment")
    else:
        raise ValueError(f"unknown correlation kind {kind!r}")
    denom = npairs - p
    if denom <= 0:
        raise DegenerateFitError(
            f"alpha moment denominator is {denom} ({npairs} pairs, p={p})"
        )
    raw = total / (denom * phi)
    return clamp_alpha(kind, raw, n_max)


# ---------------------------------------------------------------------------
# rank checks


def check_design(data: PanelDataset) -> None:
    """Raise :class:`RankDeficientError` for constant or collinear columns."""
    X = data.X
    names = list(data.schema)
    if X.shape[0] == 0:
        raise FitError("no observations to fit")
    const = [
        names[k]
        for k in range(X.shape[1])
        if names[k] != INTERCEPT and np.ptp(X[:, k]) == 0.0
    ]
    if const:
        raise RankDeficientError(
            f"zero-variance design column(s): {', '.join(const)}", const
        )
    if X.shape[0] < X.shape[1]:
        raise RankDeficientError(
            f"{X.shape[0]} observations cannot identify {X.shape[1]} parameters", names
        )
    # column scaling keeps the rank tolerance meaningful for mixed units
    scale = np.sqrt((X * X).sum(axis=0))
    R, piv = qr(X / scale, mode="r", pivoting=True)
    d = np.abs(np.diag(R))
    tol = d[0] * max(X.shape) * np.finfo(float).eps * 10
    rank = int((d > tol).sum())
    if rank < X.shape[1]:
        bad = [names[k] for k in sorted(piv[rank:])]
        raise RankDeficientError(
            f"design has rank {rank} < {X.shape[1]}; collinear column(s): {', '.join(bad)}",
            bad,
        )


# ---------------------------------------------------------------------------
# batched aggregation over clusters sharing a correlation pattern


class _Blocks:
    """Clusters grouped by the shape of their inverse correlation matrix."""

    def __init__(self, data: PanelDataset, kind: str):
        self.kind = kind
        groups: dict[tuple, list[int]] = {}
        for i, c in enumerate(data.clusters):
            if kind == "ar1":
                key = (c.n,) + tuple(np.diff(c.years).tolist())
            else:
                key = (c.n,)
            groups.setdefault(key, []).append(i)
        self.groups = []
        starts = data.starts
        for key in sorted(groups):
            members = np.array(groups[key], dtype=np.int64)
            n = key[0]
            rows = starts[members][:, None] + np.arange(n)[None, :]
            rel_years = np.concatenate([[0], np.cumsum(key[1:])]) if kind == "ar1" else np.arange(n)
            self.groups.append((members, rows, rel_years))

    def inverses(self, corr: WorkingCorrelation):
        return [inverse_correlation(corr, yrs) for _, _, yrs in self.groups]

    def aggregate(self, Xt, e, Rinvs, n_clusters, need_scores=False):
        p = Xt.shape[1]
        B = np.zeros((p, p))
        U = np.zeros(p)
        scores = np.zeros((n_clusters, p)) if need_scores else None
        for (members, rows, _), Rinv in zip(self.groups, Rinvs):
            Xg = Xt[rows]
            eg = e[rows]
            T = np.matmul(Rinv, Xg)
            B += Xg.reshape(-1, p).T @ T.reshape(-1, p)
            u = np.einsum("gnp,gn->gp", T, eg)
            U += u.sum(axis=0)
            if need_scores:
                scores[members] = u
        return B, U, scores


def _working(data, beta):
    mu = fitted_mean(data, beta)
    sq = np.sqrt(mu)
    Xt = data.X * sq[:, None]
    e = (data.y - mu) / sq
    return mu, Xt, e


def _cholesky_solve(B, rhs, what="sum(D' V^-1 D)"):
    try:
        factor = cho_factor(B, lower=True)
    except LinAlgError:
        cond = float(np.linalg.cond(B))
        raise NonSPDError(f"{what} is not positive definite (condition ~ {cond:.3g})", cond)
    return cho_solve(factor, rhs)


def _quasi_loglik(y, mu):
    ll = -mu.copy()
    pos = y > 0
    ll[pos] += y[pos] * np.log(mu[pos])
    return float(ll.sum())


# ---------------------------------------------------------------------------
# estimators


def _irls(data: PanelDataset, tol: float, max_iter: int):
    X, y, off = data.X, data.y, data.offset
    ybar = y.mean()
    if not ybar > 0:
        raise DegenerateFitError("all responses are zero; log-link mean is unbounded")
    beta = np.zeros(X.shape[1])
    beta[0] = np.log(ybar)
    ql = _quasi_loglik(y, np.exp(np.minimum(X @ beta + off, _ETA_MAX)))
    for it in range(1, max_iter + 1):
        mu = np.exp(np.minimum(X @ beta + off, _ETA_MAX))
        H = X.T @ (X * mu[:, None])
        g = X.T @ (y - mu)
        step = _cholesky_solve(H, g, "X' W X")
        for _ in range(_MAX_HALVINGS + 1):
            trial = beta + step
            ql_new = _quasi_loglik(y, np.exp(np.minimum(X @ trial + off, _ETA_MAX)))
            if ql_new >= ql - 1e-12 * abs(ql):
                break
            step = step / 2
        beta = trial
        ql = ql_new
        if np.max(np.abs(step)) < tol:
            return beta, it, True
    return beta, max_iter, False


def irls_glm(data: PanelDataset, spec: ModelSpec | None = None) -> np.ndarray:
    """Quasi-Poisson estimate under working independence (Newton / IRLS)."""
    spec = spec or ModelSpec()
    check_design(data)
    beta, n_iter, ok = _irls(data, spec.tol, spec.max_iter)
    if not ok:
        raise ConvergenceError(f"IRLS did not converge in {spec.max_iter} iterations")
    return beta


def _nuisance(data, e_flat, p, kind, fixed_alpha, n_max):
    resid = _split(e_flat, data)
    phi = estimate_phi(resid, data.n_obs, p)
    # rounding leaves ~1e-32 instead of an exact zero on perfect fits
    if phi <= 1e-20 * max(1.0, float(np.mean(data.y))):
        raise DegenerateFitError("dispersion estimate is zero: the model fits every observation exactly")
    if kind == "independence":
        return phi, None, False
    if fixed_alpha is not None:
        a, clamped = clamp_alpha(kind, float(fixed_alpha), n_max)
        return phi, a, clamped
    years = [c.years for c in data.clusters] if kind == "ar1" else None
    alpha, clamped = estimate_alpha(resid, p, phi, kind, years)
    return phi, alpha, clamped


def gee_fit(data: PanelDataset, spec: ModelSpec) -> FitResult:
    """Fit the marginal model by alternating Fisher scoring and moment updates.

    A run that hits ``spec.max_iter`` returns with ``converged=False`` and
    the last iterate instead of raising.
    """
    if data.n_clusters == 0:
        raise FitError("no observations to fit")
    check_design(data)
    p = data.p
    if data.n_obs <= p:
        raise DegenerateFitError(f"need more observations than parameters (N={data.n_obs}, p={p})")
    diagnostics = []
    kind = spec.correlation
    n_max = int(data.sizes.max())
    if kind != "independence" and n_max < 2:
        diagnostics.append("all clusters are singletons; correlation parameter is undefined")
        kind = "independence"

    beta, init_iter, init_ok = _irls(data, spec.tol, spec.max_iter)
    if not init_ok:
        diagnostics.append("independence initializer reached its iteration cap")
    blocks = _Blocks(data, kind)

    any_clamped = False
    converged = False
    n_iter = 0
    for n_iter in range(1, spec.max_iter + 1):
        mu, Xt, e = _working(data, beta)
        phi, alpha, clamped = _nuisance(data, e, p, kind, spec.fixed_alpha, n_max)
        any_clamped |= clamped
        corr = WorkingCorrelation(kind, alpha)
        Rinvs = blocks.inverses(corr)
        B, U, _ = blocks.aggregate(Xt, e, Rinvs, data.n_clusters)
        step = _cholesky_solve(B, U)
        norm0 = np.max(np.abs(U)) / phi
        for _ in range(_MAX_HALVINGS):
            _, Xt1, e1 = _working(data, beta + step)
            _, U1, _ = blocks.aggregate(Xt1, e1, Rinvs, data.n_clusters)
            if np.max(np.abs(U1)) / phi <= norm0:
                break
            step = step / 2
        beta = beta + step
        if np.max(np.abs(step)) < spec.tol:
            converged = True
            break
    if not converged:
        diagnostics.append(f"no convergence after {spec.max_iter} iterations")
        logger.warning("GEE fit %r did not converge", spec.name)

    mu, Xt, e = _working(data, beta)
    phi, alpha, clamped = _nuisance(data, e, p, kind, spec.fixed_alpha, n_max)
    any_clamped |= clamped
    if any_clamped:
        diagnostics.append("correlation parameter was clamped to its validity interval")
    corr = WorkingCorrelation(kind, alpha)
    B, U, scores = blocks.aggregate(Xt, e, blocks.inverses(corr), data.n_clusters, need_scores=True)
    B /= phi
    scores /= phi
    Binv = _cholesky_solve(B, np.eye(p))
    Binv = (Binv + Binv.T) / 2
    M = scores.T @ scores
    robust = Binv @ M @ Binv
    robust = (robust + robust.T) / 2
    return FitResult(
        beta=beta,
        alpha=alpha,
        phi=phi,
        model_cov=Binv,
        robust_cov=robust,
        n_iter=n_iter,
        converged=converged,
        n_obs=data.n_obs,
        n_clusters=data.n_clusters,
        p=p,
        quasi_loglik=_quasi_loglik(data.y, mu),
        terms=tuple(data.schema),
        correlation=kind,
        alpha_clamped=any_clamped,
        model=spec.name,
        fingerprint=data.fingerprint(),
        diagnostics=tuple(diagnostics),
    )


def score(data: PanelDataset, fit: FitResult) -> np.ndarray:
    """The estimating function sum D' V^-1 (y - mu) at the fitted state."""
    blocks = _Blocks(data, fit.working_correlation.kind)
    _, Xt, e = _working(data, fit.beta)
    _, U, _ = blocks.aggregate(Xt, e, blocks.inverses(fit.working_correlation), data.n_clusters)
    return U / fit.phi


def cluster_workspaces(data: PanelDataset, beta, corr: WorkingCorrelation, phi: float) -> list[ClusterWorkspace]:
    """Explicit per-cluster ``mu``, ``D`` and ``V^-1`` (unbatched reference path)."""
    out = []
    beta = np.asarray(beta, dtype=float)
    for c in data.clusters:
        mu = np.exp(np.minimum(c.X @ beta + c.offset, _ETA_MAX))
        D = c.X * mu[:, None]
        s = 1.0 / np.sqrt(mu)
        Vinv = inverse_correlation(corr, c.years) * np.outer(s, s) / phi
        out.append(ClusterWorkspace(mu, D, Vinv))
    return out
