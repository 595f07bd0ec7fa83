"""Residual surfaces, choropleth export and global Moran's I."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

import numpy as np
from scipy import sparse

from .engine import FitResult, fitted_mean
from .errors import SpatialError, ZeroVarianceError
from .ingest import PanelDataset


def response_residuals(data: PanelDataset, fit: FitResult) -> np.ndarray:
    """Observed minus expected rate for every observation, in dataset order."""
    if len(fit.beta) != data.p or fit.n_obs != data.n_obs:
        raise ValueError(
            f"fit ({len(fit.beta)} params, {fit.n_obs} obs) does not match "
            f"dataset ({data.p} params, {data.n_obs} obs)"
        )
    return data.y - fitted_mean(data, fit.beta)


@dataclass(frozen=True)
class SurfaceEntry:
    mean_observed: float
    mean_expected: float
    mean_residual: float
    n_years: int


@dataclass
class ResidualSurface:
    entries: dict[str, SurfaceEntry]
    model: str = ""

    def __len__(self):
        return len(self.entries)

    def values(self) -> dict[str, float]:
        return {k: e.mean_residual for k, e in self.entries.items()}

    def write_csv(self, path, bins: Mapping[str, int] | None = None) -> None:
        with Path(path).open("w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            header = ["fips", "n_years", "mean_observed", "mean_expected", "mean_residual"]
            if bins is not None:
                header.append("bin")
            w.writerow(header)
            for fips in sorted(self.entries):
                e = self.entries[fips]
                row = [fips, e.n_years, repr(e.mean_observed), repr(e.mean_expected), repr(e.mean_residual)]
                if bins is not None:
                    row.append(bins.get(fips, ""))
                w.writerow(row)


def county_mean_residual(residuals, data: PanelDataset, model: str = "") -> ResidualSurface:
    """Unweighted per-county means over each county's available years."""
    residuals = np.asarray(residuals, dtype=float)
    if residuals.shape != (data.n_obs,):
        raise ValueError("residuals are not aligned with the dataset")
    entries = {}
    for c, start in zip(data.clusters, data.starts):
        r = residuals[start:start + c.n]
        obs = float(c.y.mean())
        res = float(r.mean())
        entries[c.fips] = SurfaceEntry(obs, obs - res, res, c.n)
    return ResidualSurface(dict(sorted(entries.items())), model)


@dataclass(frozen=True)
class QuantileBins:
    bins: np.ndarray
    edges: np.ndarray
    collapsed: bool
    message: str = ""


def quantile_bins(values, k: int) -> QuantileBins:
    """Quantile classes ``0..k-1``, lower-inclusive; equal values share a bin."""
    values = np.asarray(values, dtype=float).ravel()
    if k < 2:
        raise ValueError(f"need at least 2 bins, got {k}")
    if values.size == 0:
        raise ValueError("cannot bin an empty vector")
    edges = np.quantile(values, np.arange(1, k) / k)
    bins = np.searchsorted(edges, values, side="right")
    occupied = np.unique(bins).size
    distinct = np.unique(values).size
    msg = ""
    if distinct < k or occupied < k:
        msg = f"{k} bins requested but only {occupied} occupied ({distinct} distinct values)"
    return QuantileBins(bins, edges, bool(msg), msg)


# ---------------------------------------------------------------------------
# adjacency and Moran's I


@dataclass(frozen=True)
class AdjacencyGraph:
    """Symmetric binary contiguity, no self-loops."""

    neighbors: dict[str, tuple[str, ...]]

    @classmethod
    def from_edges(cls, edges: Iterable[tuple[str, str]]) -> "AdjacencyGraph":
        nb: dict[str, set[str]] = {}
        for a, b in edges:
            a, b = str(a).strip(), str(b).strip()
            if a == b:
                raise SpatialError(f"self-loop on {a} in adjacency list")
            nb.setdefault(a, set()).add(b)
            nb.setdefault(b, set()).add(a)
        return cls({k: tuple(sorted(v)) for k, v in sorted(nb.items())})

    def restrict(self, keys: Iterable[str]) -> "AdjacencyGraph":
        keep = set(keys)
        return AdjacencyGraph(
            {k: tuple(n for n in v if n in keep) for k, v in self.neighbors.items() if k in keep}
        )

    def weights(self, keys, row_standardize: bool = False) -> sparse.csr_matrix:
        pos = {k: i for i, k in enumerate(keys)}
        rows, cols = [], []
        for k in keys:
            for n in self.neighbors.get(k, ()):
                if n in pos:
                    rows.append(pos[k])
                    cols.append(pos[n])
        data = np.ones(len(rows))
        W = sparse.csr_matrix((data, (rows, cols)), shape=(len(keys), len(keys)))
        if row_standardize:
            deg = np.asarray(W.sum(axis=1)).ravel()
            deg[deg == 0] = 1.0
            W = sparse.diags(1.0 / deg) @ W
        return W.tocsr()


def load_adjacency(path) -> AdjacencyGraph:
    """Read an edge list with one ``fips_a,fips_b`` pair per line."""
    try:
        lines = Path(path).read_text(encoding="utf-8").splitlines()
    except OSError as exc:
        raise SpatialError(f"cannot read adjacency file {path}: {exc}") from exc
    edges = []
    for lineno, line in enumerate(lines, start=1):
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        parts = [p.strip() for p in line.split(",")]
        if len(parts) != 2:
            raise SpatialError(f"{path}:{lineno}: expected 'fips_a,fips_b', got {line!r}")
        if lineno == 1 and not any(ch.isdigit() for ch in line):
            continue
        edges.append((parts[0], parts[1]))
    return AdjacencyGraph.from_edges(edges)


@dataclass(frozen=True)
class MoranResult:
    I: float
    p_value: float | None
    expected: float
    n: int
    permutations: int
    seed: int | None = None

    def to_dict(self):
        return {
            "I": self.I,
            "expected_I": self.expected,
            "p_value": self.p_value,
            "n": self.n,
            "permutations": self.permutations,
            "seed": self.seed,
        }


def _moran_stat(z, W, s0):
    n = z.shape[-1]
    return n / s0 * float(z @ (W @ z)) / float(z @ z)


def morans_i(
    values: Mapping[str, float],
    graph: AdjacencyGraph,
    permutations: int = 999,
    seed: int = 0,
    row_standardize: bool = False,
    chunk: int = 200,
) -> MoranResult:
    """Global Moran's I with a two-sided permutation p-value.

    The p-value is ``(m + 1) / (B + 1)`` where ``m`` counts permutations
    whose ``|I|`` is at least the observed ``|I|``. Permutations are drawn
    from numpy's PCG64 generator seeded with ``seed``.
    """
    keys = sorted(values)
    n = len(keys)
    if n < 3:
        raise SpatialError(f"Moran's I needs at least 3 locations, got {n}")
    x = np.array([values[k] for k in keys], dtype=float)
    z = x - x.mean()
    ss = float(z @ z)
    if ss <= 1e-24 * max(1.0, float(x @ x)):
        raise ZeroVarianceError("values have zero variance; Moran's I is undefined")
    sub = graph.restrict(keys)
    isolated = [k for k in keys if not sub.neighbors.get(k)]
    if isolated:
        raise SpatialError(f"location(s) without neighbours in the graph: {', '.join(isolated)}")
    W = sub.weights(keys, row_standardize)
    s0 = float(W.sum())
    I = _moran_stat(z, W, s0)
    if permutations <= 0:
        return MoranResult(I, None, -1.0 / (n - 1), n, 0, seed)
    rng = np.random.Generator(np.random.PCG64(seed))
    extreme = 0
    done = 0
    tol = 1e-12 * max(1.0, abs(I))
    while done < permutations:
        b = min(chunk, permutations - done)
        order = np.argsort(rng.random((b, n)), axis=1, kind="stable")
        zp = z[order]
        lag = (W @ zp.T).T
        Ip = n / s0 * np.einsum("bi,bi->b", zp, lag) / ss
        extreme += int(np.sum(np.abs(Ip) >= abs(I) - tol))
        done += b
    p = (extreme + 1) / (permutations + 1)
    return MoranResult(I, p, -1.0 / (n - 1), n, permutations, seed)


# ---------------------------------------------------------------------------
# GeoJSON


@dataclass
class ExportReport:
    matched: int = 0
    unmatched_surface: list[str] = field(default_factory=list)
    unmatched_geometry: list[str] = field(default_factory=list)
    warnings: list[str] = field(default_factory=list)

    def to_dict(self):
        return {
            "matched": self.matched,
            "unmatched_surface": self.unmatched_surface,
            "unmatched_geometry": self.unmatched_geometry,
            "warnings": self.warnings,
        }


def load_geometry(path) -> dict:
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, ValueError) as exc:
        raise SpatialError(f"cannot read geometry file {path}: {exc}") from exc
    return doc


def _feature_fips(feature, prop):
    props = feature.get("properties") or {}
    if prop not in props or props[prop] is None:
        raise SpatialError(f"feature without {prop!r} property: {props!r}")
    raw = props[prop]
    if isinstance(raw, (int, float)):
        raw = str(int(raw)).zfill(5)
    return str(raw).strip()


def export_geojson(surface: ResidualSurface, geometry, fips_property: str = "fips", k: int = 5):
    """Join surface values onto county features.

    Returns
    -------
    doc : dict
        FeatureCollection of matched features, each carrying
        ``mean_residual``, ``mean_observed``, ``mean_expected``, ``n_years``
        and quantile ``bin`` of the mean residual.
    report : ExportReport
    """
    if not isinstance(geometry, Mapping):
        geometry = load_geometry(geometry)
    if geometry.get("type") != "FeatureCollection" or not isinstance(geometry.get("features"), list):
        raise SpatialError("geometry must be a GeoJSON FeatureCollection")
    report = ExportReport()
    if not surface.entries:
        report.warnings.append("empty residual surface; exported an empty feature collection")
        return {"type": "FeatureCollection", "features": []}, report

    keys = sorted(surface.entries)
    binned = quantile_bins([surface.entries[k_].mean_residual for k_ in keys], k)
    if binned.collapsed:
        report.warnings.append(binned.message)
    bins = dict(zip(keys, binned.bins.tolist()))

    features = []
    seen = set()
    for feat in geometry["features"]:
        fips = _feature_fips(feat, fips_property)
        entry = surface.entries.get(fips)
        if entry is None:
            report.unmatched_geometry.append(fips)
            continue
        seen.add(fips)
        props = dict(feat.get("properties") or {})
        props.update(
            mean_residual=entry.mean_residual,
            mean_observed=entry.mean_observed,
            mean_expected=entry.mean_expected,
            n_years=entry.n_years,
            bin=bins[fips],
        )
        out = {"type": "Feature", "properties": props, "geometry": feat.get("geometry")}
        if "id" in feat:
            out["id"] = feat["id"]
        features.append(out)
    report.matched = len(features)
    report.unmatched_surface = [k_ for k_ in keys if k_ not in seen]
    report.unmatched_geometry.sort()
    return {"type": "FeatureCollection", "features": features}, report


def grid_layout(fips: list[str]):
    """Place counties on a square grid in the given order.

    Returns rook-contiguity edges and a FeatureCollection of unit squares,
    for exercising the spatial outputs on synthetic panels.
    """
    side = max(1, int(np.ceil(np.sqrt(len(fips)))))
    pos = {f: divmod(i, side) for i, f in enumerate(fips)}
    at = {rc: f for f, rc in pos.items()}
    edges = []
    features = []
    for f in fips:
        r, c = pos[f]
        for rc in ((r, c + 1), (r + 1, c)):
            if rc in at:
                edges.append((f, at[rc]))
        ring = [[c, r], [c + 1, r], [c + 1, r + 1], [c, r + 1], [c, r]]
        features.append(
            {
                "type": "Feature",
                "properties": {"fips": f},
                "geometry": {"type": "Polygon", "coordinates": [ring]},
            }
        )
    return edges, {"type": "FeatureCollection", "features": features}
