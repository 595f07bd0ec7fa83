"""Robust covariance, Wald tests, effect transforms, QIC and nested ladders."""
from __future__ import annotations

import hashlib
import json
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from statistics import NormalDist
from typing import Sequence

import numpy as np

from .engine import FitResult, cluster_workspaces, fitted_mean, gee_fit
from .errors import FitError, NonSPDError
from .ingest import INTERCEPT, PanelDataset, PanelRow, build_panel, complete_case_filter
from .modelspec import URBAN_LABELS, ModelSpec

Z95 = 1.959964


def sandwich_covariance(data: PanelDataset, fit: FitResult) -> np.ndarray:
    """``B^-1 M B^-1`` with ``B = sum D'V^-1 D`` and ``M = sum D'V^-1 r r' V^-1 D``."""
    ws = cluster_workspaces(data, fit.beta, fit.working_correlation, fit.phi)
    p = len(fit.beta)
    B = np.zeros((p, p))
    M = np.zeros((p, p))
    for w, c in zip(ws, data.clusters):
        DV = w.D.T @ w.Vinv
        B += DV @ w.D
        u = DV @ (c.y - w.mu)
        M += np.outer(u, u)
    try:
        Binv = np.linalg.inv(B)
    except np.linalg.LinAlgError as exc:
        raise NonSPDError("sum(D' V^-1 D) is singular", float(np.linalg.cond(B))) from exc
    V = Binv @ M @ Binv
    return (V + V.T) / 2


def wald_test(estimate: float, std_err: float) -> tuple[float, float]:
    """Wald chi-square on one degree of freedom; returns (W, p)."""
    if not std_err > 0:
        raise ValueError(f"std_err must be positive, got {std_err!r}")
    z = estimate / std_err
    return z * z, math.erfc(abs(z) / math.sqrt(2.0))


def format_p(p: float) -> str:
    return f"{p:.4f}"


def _z(level: float) -> float:
    if not 0.0 < level < 1.0:
        raise ValueError(f"confidence level must lie in (0, 1), got {level!r}")
    if level == 0.95:
        return Z95
    return NormalDist().inv_cdf(0.5 + level / 2.0)


def rate_ratio(estimate: float, std_err: float, level: float = 0.95) -> tuple[float, float, float]:
    """Exponentiated coefficient with its Wald interval."""
    if not std_err > 0:
        raise ValueError(f"std_err must be positive, got {std_err!r}")
    z = _z(level)
    return math.exp(estimate), math.exp(estimate - z * std_err), math.exp(estimate + z * std_err)


def percent_change(rr: float) -> float:
    if not rr > 0:
        raise ValueError(f"rate ratio must be positive, got {rr!r}")
    return (rr - 1.0) * 100.0


def percent_change_per_delta(estimate: float, delta: float = 10.0) -> float:
    """Percent change in the rate for a ``delta``-unit increase in a covariate."""
    return math.expm1(delta * estimate) * 100.0


def describe_change(pc: float, comparison: str = "the referent") -> str:
    direction = "higher" if pc > 0 else "lower" if pc < 0 else "no different"
    if pc == 0:
        return f"{direction} than {comparison}"
    return f"{abs(pc):.2f}% {direction} than {comparison}"


# ---------------------------------------------------------------------------
# quasi-likelihood and QIC


def quasi_likelihood(data: PanelDataset, mu) -> float:
    """``sum(y log mu - mu)``; zero responses contribute ``-mu`` only."""
    mu = np.asarray(mu, dtype=float)
    y = data.y
    ll = -mu.copy()
    pos = y > 0
    ll[pos] += y[pos] * np.log(mu[pos])
    return float(ll.sum())


def independence_information(data: PanelDataset, fit: FitResult) -> np.ndarray:
    """Model-based information under working independence at the fitted beta.

    Scaled by the fit's dispersion, so its inverse is the naive
    independence covariance.
    """
    mu = fitted_mean(data, fit.beta)
    return data.X.T @ (data.X * mu[:, None]) / fit.phi


@dataclass(frozen=True)
class QIC:
    value: float
    quasi_loglik: float
    trace: float

    def __float__(self):
        return self.value


def qic_terms(fit: FitResult, data: PanelDataset, robust_cov=None) -> QIC:
    """QIC with its ingredients; ``robust_cov`` overrides the fit's sandwich."""
    if len(fit.beta) != data.p or fit.n_obs != data.n_obs:
        raise FitError("fit and dataset dimensions disagree")
    omega = independence_information(data, fit)
    if not np.all(np.isfinite(omega)) or np.linalg.matrix_rank(omega) < data.p:
        raise NonSPDError("independence information matrix is not invertible")
    Vr = fit.robust_cov if robust_cov is None else np.asarray(robust_cov, dtype=float)
    ql = quasi_likelihood(data, fitted_mean(data, fit.beta))
    tr = float(np.sum(omega * Vr.T))
    return QIC(-2.0 * ql + 2.0 * tr, ql, tr)


def qic(fit: FitResult, data: PanelDataset, robust_cov=None) -> float:
    return qic_terms(fit, data, robust_cov).value


# ---------------------------------------------------------------------------
# coefficient tables


@dataclass(frozen=True)
class CoefficientRow:
    term: str
    estimate: float | None
    std_err: float | None
    rate_ratio: float | None
    ci_low: float | None
    ci_high: float | None
    p_value: float | None
    group: str = ""
    referent: bool = False

    def to_dict(self):
        return {
            "term": self.term,
            "group": self.group,
            "referent": self.referent,
            "estimate": self.estimate,
            "std_err": self.std_err,
            "rate_ratio": self.rate_ratio,
            "ci_low": self.ci_low,
            "ci_high": self.ci_high,
            "p_value": self.p_value,
        }


def term_group(term: str) -> str:
    if term == INTERCEPT:
        return ""
    if term.startswith("URBAN_CODE:"):
        return "Urban Code"
    if term.startswith("YEAR:"):
        return "Year"
    if term.startswith("JAIL_"):
        return "Jail"
    if term.startswith("PRISON_"):
        return "State"
    return "County"


def display_term(term: str) -> str:
    if term.startswith("URBAN_CODE: "):
        level = term.split(": ", 1)[1]
        return f"URBAN_CODE: {URBAN_LABELS.get(level, level)}"
    return term


@dataclass
class CoefficientTable:
    model: str
    rows: list[CoefficientRow]
    n_obs: int
    n_clusters: int
    qic: float
    alpha: float | None = None
    phi: float | None = None
    n_iter: int = 0
    converged: bool = True
    correlation: str = ""
    quasi_loglik: float | None = None
    qic_trace: float | None = None
    fingerprint: str = ""
    diagnostics: list[str] = field(default_factory=list)

    def coefficient(self, term: str) -> CoefficientRow:
        for r in self.rows:
            if r.term == term:
                return r
        raise KeyError(term)

    def to_dict(self):
        return {
            "model": self.model,
            "correlation": self.correlation,
            "rows": [r.to_dict() for r in self.rows],
            "footer": {
                "N": self.n_obs,
                "clusters": self.n_clusters,
                "QIC": self.qic,
                "quasi_loglik": self.quasi_loglik,
                "qic_trace": self.qic_trace,
                "alpha": self.alpha,
                "phi": self.phi,
                "iterations": self.n_iter,
                "converged": self.converged,
            },
            "dataset_fingerprint": self.fingerprint,
            "diagnostics": list(self.diagnostics),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        return render_tables([self])


def _referent_rows(data: PanelDataset) -> dict[str, CoefficientRow]:
    out = {}
    if any(t.startswith("URBAN_CODE:") for t in data.schema):
        ref = data.referents.get("urban_code", "rural")
        t = f"URBAN_CODE: {ref}"
        out["Urban Code"] = CoefficientRow(t, None, None, None, None, None, None, "Urban Code", True)
    if any(t.startswith("YEAR:") for t in data.schema):
        t = f"YEAR: {data.referents.get('year', 2000)}"
        out["Year"] = CoefficientRow(t, None, None, None, None, None, None, "Year", True)
    return out


def coefficient_table(fit: FitResult, data: PanelDataset, level: float = 0.95) -> CoefficientTable:
    """Tabulate a fit with robust SEs, rate ratios, Wald p-values and QIC."""
    q = qic_terms(fit, data)
    se = fit.std_err
    refs = _referent_rows(data)
    rows = []
    for k, term in enumerate(fit.terms):
        group = term_group(term)
        if group in refs:
            rows.append(refs.pop(group))
        est = float(fit.beta[k])
        s = float(se[k])
        if s > 0:
            rr, lo, hi = rate_ratio(est, s, level)
            _, p = wald_test(est, s)
        else:
            rr, lo, hi, p = math.exp(est), None, None, None
        rows.append(CoefficientRow(term, est, s, rr, lo, hi, p, group))
    return CoefficientTable(
        model=fit.model,
        rows=rows,
        n_obs=fit.n_obs,
        n_clusters=fit.n_clusters,
        qic=q.value,
        alpha=fit.alpha,
        phi=fit.phi,
        n_iter=fit.n_iter,
        converged=fit.converged,
        correlation=fit.correlation,
        quasi_loglik=q.quasi_loglik,
        qic_trace=q.trace,
        fingerprint=fit.fingerprint,
        diagnostics=list(fit.diagnostics),
    )


def _cell(row: CoefficientRow | None) -> list[str]:
    if row is None:
        return ["", "", "", ""]
    if row.referent:
        return ["*", "", "", ""]
    rr = ""
    if row.term != INTERCEPT and row.ci_low is not None:
        rr = f"{row.rate_ratio:.2f} ({row.ci_low:.2f}, {row.ci_high:.2f})"
    p = format_p(row.p_value) if row.p_value is not None else ""
    return [f"{row.estimate:.2f}", f"{row.std_err:.2f}", rr, p]


def render_tables(tables: Sequence[CoefficientTable]) -> str:
    """Aligned plain-text table, one column group per model."""
    order: list[str] = []
    for t in tables:
        for r in t.rows:
            if r.term not in order:
                order.append(r.term)
    lookup = [{r.term: r for r in t.rows} for t in tables]

    def display(term):
        label = display_term(term)
        for lk in lookup:
            if term in lk and lk[term].referent:
                return label + "*"
        return label

    body = [["", ""] + sum((["Estimate", "Std.err", "Rate Ratio (95% CI)", "Pr(> W)"] for _ in tables), [])]
    for term in order:
        group = term_group(term)
        body.append([group, display(term)] + sum((_cell(lk.get(term)) for lk in lookup), []))
    footer = [
        ("N", [str(t.n_obs) for t in tables]),
        ("Clusters", [str(t.n_clusters) for t in tables]),
        ("Model fit: QIC", [f"{t.qic:.0f}" for t in tables]),
        ("alpha", ["" if t.alpha is None else f"{t.alpha:.4f}" for t in tables]),
        ("phi", [f"{t.phi:.4f}" if t.phi is not None else "" for t in tables]),
        ("iterations", [str(t.n_iter) for t in tables]),
        ("converged", ["yes" if t.converged else "NO" for t in tables]),
    ]
    for label, vals in footer:
        row = ["", label]
        for v in vals:
            row += ["", "", v, ""]
        body.append(row)

    ncol = len(body[0])
    widths = [max(len(r[i]) for r in body) for i in range(ncol)]
    lines = []
    group_w = [sum(widths[2 + 4 * g: 6 + 4 * g]) + 6 for g in range(len(tables))]
    head = " " * (widths[0] + widths[1] + 4)
    head += "  ".join(t.model.ljust(w) for t, w in zip(tables, group_w))
    lines.append(head.rstrip())
    for r in body:
        lines.append("  ".join(c.ljust(w) if i < 2 else c.rjust(w) for i, (c, w) in enumerate(zip(r, widths))).rstrip())
    lines.append("*Referent; QIC = quasi likelihood information criterion")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# nested ladders


@dataclass
class NestedComparison:
    models: list[tuple[str, CoefficientTable]]
    fingerprint: str
    n_obs: int
    n_clusters: int
    drop_report: object = None

    def table(self, name: str) -> CoefficientTable:
        for label, t in self.models:
            if label == name:
                return t
        raise KeyError(name)

    def to_dict(self):
        return {
            "dataset": {
                "N": self.n_obs,
                "clusters": self.n_clusters,
                "rows_fingerprint": self.fingerprint,
            },
            "models": [t.to_dict() for _, t in self.models],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    def to_text(self) -> str:
        return render_tables([t for _, t in self.models])


def ladder_required(ladder: Sequence[ModelSpec], mode: str = "rate") -> set[str]:
    cols: set[str] = set()
    for spec in ladder:
        cols |= spec.required_columns(mode)
    return cols


def _rows_fingerprint(rows: Sequence[PanelRow]) -> str:
    h = hashlib.sha256()
    for r in sorted(rows, key=lambda r: (r.fips, r.year)):
        h.update(f"{r.fips}|{r.year}\n".encode())
    return h.hexdigest()


def fit_model(rows: Sequence[PanelRow], spec: ModelSpec, mode: str = "rate"):
    """Build the panel for ``spec`` and fit it; returns (data, fit, table)."""
    data = build_panel(rows, spec, mode)
    fit = gee_fit(data, spec)
    return data, fit, coefficient_table(fit, data)


def nested_run(rows: Sequence[PanelRow], ladder: Sequence[ModelSpec], mode: str = "rate", threads: int = 1) -> NestedComparison:
    """Fit every ladder model on the rows complete for the union of their columns."""
    if not ladder:
        raise ValueError("ladder must contain at least one model")
    names = [s.name for s in ladder]
    if len(set(names)) != len(names):
        raise ValueError(f"ladder model names must be unique: {names}")
    kept, report = complete_case_filter(rows, ladder_required(ladder, mode))

    def run(spec):
        try:
            return fit_model(kept, spec, mode)[2]
        except FitError as exc:
            exc.args = (f"model {spec.name!r}: {exc}",) + exc.args[1:]
            raise

    if threads > 1:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            tables = list(pool.map(run, ladder))
    else:
        tables = [run(s) for s in ladder]
    n_clusters = len({r.fips for r in kept})
    return NestedComparison(
        models=list(zip(names, tables)),
        fingerprint=_rows_fingerprint(kept),
        n_obs=len(kept),
        n_clusters=n_clusters,
        drop_report=report,
    )
