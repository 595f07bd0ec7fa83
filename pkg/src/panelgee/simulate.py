"""Synthetic random-intercept Poisson panels and resampling oracles.

All randomness comes from numpy's PCG64 bit generator. Only its uniform
doubles are consumed; normal and Poisson variates are derived here
(Box-Muller, inversion below mean 10, Hormann's PTRS rejection above) so a
fixed seed gives the same draws regardless of numpy's distribution code.
"""
from __future__ import annotations

import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.special import gammaln

from .engine import gee_fit
from .errors import ConfigError, FitError
from .ingest import PanelDataset, PanelRow, build_panel, complete_case_filter, write_csv
from .modelspec import URBAN_LEVELS, ModelSpec

_INVERSION_LIMIT = 10.0


def make_rng(seed: int) -> np.random.Generator:
    return np.random.Generator(np.random.PCG64(int(seed)))


def standard_normal(rng: np.random.Generator, size: int) -> np.ndarray:
    u1 = rng.random(size)
    u2 = rng.random(size)
    return np.sqrt(-2.0 * np.log1p(-u1)) * np.cos(2.0 * np.pi * u2)


def _poisson_inversion(rng, lam):
    u = rng.random(lam.size)
    k = np.zeros(lam.size, dtype=np.int64)
    p = np.exp(-lam)
    cdf = p.copy()
    active = u > cdf
    while active.any():
        idx = np.flatnonzero(active)
        k[idx] += 1
        p[idx] *= lam[idx] / k[idx]
        cdf[idx] += p[idx]
        # guard against cdf stalling just below u from rounding
        active[idx] = (u[idx] > cdf[idx]) & (p[idx] > 0)
    return k


def _poisson_ptrs(rng, lam):
    """Transformed rejection with squeeze (Hormann 1993), for lam >= 10."""
    out = np.zeros(lam.size, dtype=np.int64)
    slam = np.sqrt(lam)
    loglam = np.log(lam)
    b = 0.931 + 2.53 * slam
    a = -0.059 + 0.02483 * b
    invalpha = 1.1239 + 1.1328 / (b - 3.4)
    vr = 0.9277 - 3.6224 / (b - 2.0)
    pending = np.arange(lam.size)
    while pending.size:
        U = rng.random(pending.size) - 0.5
        V = rng.random(pending.size)
        a_, b_, l_ = a[pending], b[pending], lam[pending]
        us = 0.5 - np.abs(U)
        k = np.floor((2.0 * a_ / us + b_) * U + l_ + 0.43)
        quick = (us >= 0.07) & (V <= vr[pending])
        reject = (k < 0) | ((us < 0.013) & (V > us))
        with np.errstate(divide="ignore", invalid="ignore"):
            lhs = np.log(V) + np.log(invalpha[pending]) - np.log(a_ / (us * us) + b_)
            rhs = -l_ + k * loglam[pending] - gammaln(k + 1.0)
        accept = quick | (~reject & (lhs <= rhs))
        out[pending[accept]] = k[accept].astype(np.int64)
        pending = pending[~accept]
    return out


def poisson(rng: np.random.Generator, lam) -> np.ndarray:
    lam = np.asarray(lam, dtype=float)
    flat = lam.ravel()
    out = np.zeros(flat.size, dtype=np.int64)
    small = flat < _INVERSION_LIMIT
    if small.any():
        out[small] = _poisson_inversion(rng, flat[small])
    if (~small).any():
        out[~small] = _poisson_ptrs(rng, flat[~small])
    return out.reshape(lam.shape)


@dataclass(frozen=True)
class CovariateSim:
    name: str
    beta: float
    mean: float = 0.0
    sd: float = 1.0


@dataclass(frozen=True)
class SimConfig:
    """Random-intercept Poisson panel design.

    ``intercept`` is the conditional (cluster-specific) intercept; the
    marginal model that GEE estimates has intercept
    ``intercept + sigma_b**2 / 2`` and identical slopes.
    """

    n_clusters: int = 100
    periods: int = 8
    intercept: float = math.log(20.0)
    sigma_b: float = 0.5
    covariates: tuple[CovariateSim, ...] = ()
    urban_effects: Mapping[str, float] = field(default_factory=dict)
    year_effects: Mapping[int, float] = field(default_factory=dict)
    start_year: int = 2000
    population: int = 100_000
    missing_rate: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.n_clusters < 1:
            raise ConfigError(f"n_clusters must be at least 1, got {self.n_clusters}")
        if self.periods < 1:
            raise ConfigError(f"periods must be at least 1, got {self.periods}")
        if self.sigma_b < 0:
            raise ConfigError(f"sigma_b must be non-negative, got {self.sigma_b}")
        if not 0.0 <= self.missing_rate < 1.0:
            raise ConfigError("missing_rate must lie in [0, 1)")
        if self.population <= 0:
            raise ConfigError("population must be positive")
        bad = [k for k in self.urban_effects if k not in URBAN_LEVELS or k == "rural"]
        if bad:
            raise ConfigError(f"urban_effects keys must be non-rural levels, got {bad}")
        object.__setattr__(self, "covariates", tuple(self.covariates))
        object.__setattr__(self, "year_effects", {int(k): float(v) for k, v in self.year_effects.items()})

    @classmethod
    def from_dict(cls, d: Mapping) -> "SimConfig":
        d = dict(d)
        covs = []
        for c in d.pop("covariates", []) or []:
            if isinstance(c, Mapping):
                covs.append(CovariateSim(**c))
            else:
                covs.append(CovariateSim(*c))
        d.pop("output", None)
        try:
            return cls(covariates=tuple(covs), **d)
        except TypeError as exc:
            raise ConfigError(f"bad simulation block: {exc}") from exc

    def with_seed(self, seed: int) -> "SimConfig":
        return SimConfig(
            self.n_clusters, self.periods, self.intercept, self.sigma_b, self.covariates,
            dict(self.urban_effects), dict(self.year_effects), self.start_year,
            self.population, self.missing_rate, seed,
        )

    @property
    def years(self) -> np.ndarray:
        return self.start_year + np.arange(self.periods)

    def default_spec(self, correlation: str = "exchangeable") -> ModelSpec:
        return ModelSpec(
            "simulated",
            urban_code=bool(self.urban_effects),
            year=bool(self.year_effects),
            covariates=tuple(c.name for c in self.covariates),
            correlation=correlation,
            referents={"year": self.start_year},
        )

    def marginal_beta(self, spec: ModelSpec | None = None) -> np.ndarray:
        """True marginal coefficients laid out in ``spec``'s design order."""
        spec = spec or self.default_spec()
        beta = [self.intercept + 0.5 * self.sigma_b ** 2]
        if spec.urban_code:
            beta += [self.urban_effects.get(lvl, 0.0) for lvl in spec.urban_indicator_levels]
        if spec.year:
            ref = int(spec.referents["year"])
            base = self.year_effects.get(ref, 0.0)
            beta[0] += base
            beta += [self.year_effects.get(int(y), 0.0) - base for y in self.years if int(y) != ref]
        lookup = {c.name: c.beta for c in self.covariates}
        beta += [lookup.get(name, 0.0) for name in spec.covariates]
        return np.array(beta)


def _draw_covariates(cfg: SimConfig, rng, m: int) -> dict[str, np.ndarray]:
    out = {}
    for c in cfg.covariates:
        x = c.mean + c.sd * standard_normal(rng, m)
        if c.name.endswith("_PERCENT"):
            x = np.clip(x, 0.0, 100.0)
        out[c.name] = x
    return out


def _linear_predictor(cfg, urban, year_idx, covs):
    eta = np.full(urban.size, cfg.intercept)
    for lvl, eff in cfg.urban_effects.items():
        eta += np.where(urban == URBAN_LEVELS.index(lvl), eff, 0.0)
    years = cfg.years
    for yr, eff in cfg.year_effects.items():
        eta += np.where(years[year_idx] == yr, eff, 0.0)
    for c in cfg.covariates:
        eta += c.beta * covs[c.name]
    return eta


def simulate_rows(cfg: SimConfig) -> list[PanelRow]:
    """Draw a panel in the ingest row format; a pure function of ``cfg``."""
    rng = make_rng(cfg.seed)
    G, T = cfg.n_clusters, cfg.periods
    m = G * T
    b = cfg.sigma_b * standard_normal(rng, G)
    urban_c = np.minimum((rng.random(G) * len(URBAN_LEVELS)).astype(np.int64), len(URBAN_LEVELS) - 1)
    urban = np.repeat(urban_c, T)
    year_idx = np.tile(np.arange(T), G)
    covs = _draw_covariates(cfg, rng, m)
    eta = _linear_predictor(cfg, urban, year_idx, covs) + np.repeat(b, T)
    y = poisson(rng, np.exp(eta))
    names = [c.name for c in cfg.covariates]
    if cfg.missing_rate > 0 and names:
        missing = rng.random((m, len(names))) < cfg.missing_rate
    else:
        missing = np.zeros((m, len(names)), dtype=bool)

    scale = cfg.population / 100_000.0
    rows = []
    years = cfg.years
    for i in range(m):
        g = i // T
        cov = {
            name: (None if missing[i, k] else float(covs[name][i]))
            for k, name in enumerate(names)
        }
        rows.append(
            PanelRow(
                fips=f"{g + 1:05d}",
                year=int(years[year_idx[i]]),
                jail_rate=float(y[i]) / scale,
                population=cfg.population,
                urban_code=URBAN_LEVELS[urban[i]],
                covariates=cov,
                line=i + 2,
            )
        )
    return rows


def simulate_panel(cfg: SimConfig, spec: ModelSpec | None = None, mode: str = "rate") -> PanelDataset:
    spec = spec or cfg.default_spec()
    rows = simulate_rows(cfg)
    if cfg.missing_rate > 0:
        rows, _ = complete_case_filter(rows, spec.required_columns(mode))
    return build_panel(rows, spec, mode)


def write_panel_csv(cfg: SimConfig, path) -> None:
    write_csv(simulate_rows(cfg), path, [c.name for c in cfg.covariates])


def implied_exchangeable_corr(cfg: SimConfig, mc_samples: int = 1_000_000, seed: int | None = None) -> float:
    """Monte-Carlo correlation of standardized residuals of two same-cluster draws.

    Each sample shares one random intercept between two observations at
    distinct periods with independently drawn covariates. Residuals are
    standardized by the true marginal mean ``m(x)``, ``r = (y - m)/sqrt(m)``,
    and the estimate is ``mean(r1 r2) / mean((r1^2 + r2^2) / 2)``, the
    population target of the exchangeable moment estimator. Without
    covariates this is the ordinary Pearson correlation.
    """
    if mc_samples < 100_000:
        raise ValueError("mc_samples must be at least 1e5")
    rng = make_rng(cfg.seed if seed is None else seed)
    n = int(mc_samples)
    b = cfg.sigma_b * standard_normal(rng, n)
    urban = np.minimum((rng.random(n) * len(URBAN_LEVELS)).astype(np.int64), len(URBAN_LEVELS) - 1)
    T = cfg.periods
    if T >= 2:
        t1 = np.minimum((rng.random(n) * T).astype(np.int64), T - 1)
        shift = 1 + np.minimum((rng.random(n) * (T - 1)).astype(np.int64), T - 2)
        t2 = (t1 + shift) % T
    else:
        t1 = t2 = np.zeros(n, dtype=np.int64)
    lift = 0.5 * cfg.sigma_b ** 2
    r = []
    for t in (t1, t2):
        covs = _draw_covariates(cfg, rng, n)
        eta = _linear_predictor(cfg, urban, t, covs)
        y = poisson(rng, np.exp(eta + b))
        m = np.exp(eta + lift)
        r.append((y - m) / np.sqrt(m))
    r1, r2 = r
    return float(np.mean(r1 * r2) / np.mean(0.5 * (r1 * r1 + r2 * r2)))


@dataclass(frozen=True)
class BootstrapResult:
    std_err: np.ndarray
    estimates: np.ndarray
    n_failed: int
    seed: int


def bootstrap_replicates(data: PanelDataset, spec: ModelSpec, seeds: Sequence[int], threads: int = 1):
    """Refit on cluster resamples, one per seed; returns (estimates, n_failed)."""
    G = data.n_clusters

    def one(s):
        rng = make_rng(s)
        idx = np.minimum((rng.random(G) * G).astype(np.int64), G - 1)
        try:
            fit = gee_fit(data.subset(idx, relabel=True), spec)
        except FitError:
            return None
        return fit.beta if fit.converged else None

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            results = list(pool.map(one, seeds))
    else:
        results = [one(s) for s in seeds]
    ok = [r for r in results if r is not None]
    est = np.array(ok) if ok else np.empty((0, data.p))
    return est, len(results) - len(ok)


def cluster_bootstrap(data: PanelDataset, spec: ModelSpec, B: int = 1000, seed: int = 0, threads: int = 1) -> BootstrapResult:
    """Cluster bootstrap standard errors; replicate ``r`` is seeded with ``seed ^ r``."""
    if B < 100:
        raise ValueError(f"need at least 100 bootstrap replicates, got {B}")
    est, failed = bootstrap_replicates(data, spec, [seed ^ r for r in range(B)], threads)
    if failed > 0.1 * B:
        raise FitError(f"{failed} of {B} bootstrap replicates failed to converge")
    return BootstrapResult(est.std(axis=0, ddof=1), est, failed, seed)
