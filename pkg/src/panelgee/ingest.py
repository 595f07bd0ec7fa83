"""Loading, validating and assembling county-year panels.

Missing cells are represented by ``None`` throughout; a ``0`` is always a
real observed zero.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
from collections import Counter
from dataclasses import dataclass, field
from functools import cached_property
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import IngestError, SchemaError
from .modelspec import URBAN_LEVELS, ModelSpec

MANDATORY_COLUMNS = ("fips", "year", "jail_rate", "urban_code")
CORE_COLUMNS = ("fips", "year", "population", "urban_code", "jail_rate", "jail_count")
DEFAULT_WINDOW = (2000, 2013)
RATE_SCALE = 100_000.0

INTERCEPT = "(Intercept)"


def urban_term(level: str) -> str:
    return f"URBAN_CODE: {level}"


def year_term(year: int) -> str:
    return f"YEAR: {year}"


@dataclass
class PanelRow:
    """One county-year record; ``None`` marks a missing value."""

    fips: str
    year: int
    jail_rate: float | None
    population: int | None
    urban_code: str | None
    covariates: dict[str, float | None] = field(default_factory=dict)
    jail_count: float | None = None
    line: int | None = None

    def get(self, column: str):
        if column in CORE_COLUMNS:
            return getattr(self, column)
        return self.covariates.get(column)


def compute_rate(count: float, population: float) -> float:
    """Persons per 100,000 residents."""
    if not population > 0:
        raise ValueError(f"population must be positive, got {population!r}")
    if count < 0:
        raise ValueError(f"count must be non-negative, got {count!r}")
    return count / population * RATE_SCALE


def _normalize_fips(raw: str) -> str:
    raw = raw.strip()
    if raw.isdigit() and len(raw) < 5:
        raw = raw.zfill(5)
    return raw


def _parse_float(text: str, line: int, column: str) -> float | None:
    text = text.strip()
    if text == "" or text.upper() == "NA":
        return None
    try:
        value = float(text)
    except ValueError:
        raise IngestError(f"line {line}, column {column!r}: cannot parse {text!r} as a number")
    if not math.isfinite(value):
        raise IngestError(f"line {line}, column {column!r}: non-finite value {text!r}")
    return value


def load_csv(path, schema: Mapping[str, str] | None = None) -> list[PanelRow]:
    """Read a panel CSV into :class:`PanelRow` records.

    Parameters
    ----------
    path : path-like
        UTF-8, comma-delimited file with a header row.
    schema : mapping, optional
        Logical column name -> header name in the file, for files whose
        headers differ from the canonical names. Unlisted columns map to
        themselves. Every header that is not a core column is read as a
        numeric covariate.
    """
    schema = dict(schema or {})
    path = Path(path)
    try:
        fh = path.open(newline="", encoding="utf-8")
    except OSError as exc:
        raise IngestError(f"cannot read panel file {path}: {exc}") from exc
    with fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise IngestError(f"{path}: empty file, header row expected")
        header = [h.strip() for h in header]
        inverse = {v: k for k, v in schema.items()}
        logical = [inverse.get(h, h) for h in header]
        missing = [c for c in MANDATORY_COLUMNS if c not in logical]
        if missing:
            raise IngestError(f"{path}: missing mandatory column(s): {', '.join(missing)}")
        if len(set(logical)) != len(logical):
            dup = [c for c, n in Counter(logical).items() if n > 1]
            raise IngestError(f"{path}: duplicate column(s): {', '.join(dup)}")
        index = {name: i for i, name in enumerate(logical)}
        cov_names = [c for c in logical if c not in CORE_COLUMNS]

        rows = []
        for lineno, cells in enumerate(reader, start=2):
            if not cells or all(not c.strip() for c in cells):
                continue
            if len(cells) != len(header):
                raise IngestError(
                    f"line {lineno}: expected {len(header)} fields, found {len(cells)}"
                )
            fips = _normalize_fips(cells[index["fips"]])
            if not fips:
                raise IngestError(f"line {lineno}, column 'fips': empty county identifier")
            year_text = cells[index["year"]].strip()
            try:
                year = int(year_text)
            except ValueError:
                raise IngestError(f"line {lineno}, column 'year': cannot parse {year_text!r}")
            rate = _parse_float(cells[index["jail_rate"]], lineno, "jail_rate")
            pop = None
            if "population" in index:
                pop_f = _parse_float(cells[index["population"]], lineno, "population")
                if pop_f is not None:
                    if pop_f != int(pop_f):
                        raise IngestError(
                            f"line {lineno}, column 'population': {pop_f!r} is not an integer"
                        )
                    pop = int(pop_f)
            count = None
            if "jail_count" in index:
                count = _parse_float(cells[index["jail_count"]], lineno, "jail_count")
            code = cells[index["urban_code"]].strip() or None
            covs = {c: _parse_float(cells[index[c]], lineno, c) for c in cov_names}
            rows.append(PanelRow(fips, year, rate, pop, code, covs, count, lineno))
    return rows


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_csv(rows: Sequence[PanelRow], path, covariates: Sequence[str] | None = None) -> None:
    """Write rows in the ingest schema, full float precision, empty cells for missing."""
    if covariates is None:
        covariates = list(rows[0].covariates) if rows else []
    with_count = any(r.jail_count is not None for r in rows)
    header = ["fips", "year", "population", "urban_code", "jail_rate"]
    if with_count:
        header.append("jail_count")
    header += list(covariates)
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for r in rows:
            out = [r.fips, r.year, _fmt(r.population), _fmt(r.urban_code), _fmt(r.jail_rate)]
            if with_count:
                out.append(_fmt(r.jail_count))
            out += [_fmt(r.covariates.get(c)) for c in covariates]
            w.writerow(out)


# ---------------------------------------------------------------------------
# validation


@dataclass(frozen=True)
class Violation:
    line: int | None
    fips: str
    year: int
    column: str
    kind: str
    message: str

    def to_dict(self):
        return {
            "line": self.line,
            "fips": self.fips,
            "year": self.year,
            "column": self.column,
            "kind": self.kind,
            "message": self.message,
        }


@dataclass
class ValidationReport:
    n_rows: int
    violations: list[Violation] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return not self.violations

    def counts(self) -> dict[str, int]:
        return dict(sorted(Counter(v.kind for v in self.violations).items()))

    def to_dict(self):
        return {
            "n_rows": self.n_rows,
            "n_violations": len(self.violations),
            "counts": self.counts(),
            "violations": [v.to_dict() for v in self.violations],
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [f"rows checked: {self.n_rows}", f"violations: {len(self.violations)}"]
        for v in self.violations:
            where = f"line {v.line}" if v.line is not None else "line ?"
            lines.append(f"{where} [{v.fips} {v.year}] {v.column}: {v.kind}: {v.message}")
        return "\n".join(lines) + "\n"


def validate(rows: Sequence[PanelRow], window: tuple[int, int] = DEFAULT_WINDOW) -> ValidationReport:
    """Check measurement domains; returns every violation, never raises."""
    report = ValidationReport(len(rows))
    add = report.violations.append
    first_seen: dict[tuple[str, int], int | None] = {}
    lo, hi = window
    for r in rows:
        def bad(column, kind, message):
            add(Violation(r.line, r.fips, r.year, column, kind, message))

        if not lo <= r.year <= hi:
            bad("year", "year_window", f"{r.year} outside study window {lo}-{hi}")
        if r.jail_rate is not None and r.jail_rate < 0:
            bad("jail_rate", "range", f"negative rate {r.jail_rate!r}")
        if r.jail_count is not None and r.jail_count < 0:
            bad("jail_count", "range", f"negative count {r.jail_count!r}")
        if r.population is not None and r.population <= 0:
            bad("population", "population", f"nonpositive population {r.population!r}")
        if r.urban_code is not None and r.urban_code not in URBAN_LEVELS:
            bad("urban_code", "category", f"unknown level {r.urban_code!r}")
        for name, value in r.covariates.items():
            if value is not None and name.endswith("_PERCENT") and not 0.0 <= value <= 100.0:
                bad(name, "range", f"{value!r} outside [0, 100]")
        key = (r.fips, r.year)
        if key in first_seen:
            prev = first_seen[key]
            bad("fips,year", "duplicate", f"duplicate county-year, first seen at line {prev}")
        else:
            first_seen[key] = r.line
    return report


# ---------------------------------------------------------------------------
# complete-case filtering


@dataclass
class DropReport:
    n_input: int
    n_kept: int
    required: tuple[str, ...]
    by_column: dict[str, int]
    by_county: dict[str, int]
    dropped: list[PanelRow] = field(default_factory=list, repr=False)

    @property
    def n_dropped(self) -> int:
        return self.n_input - self.n_kept

    def to_dict(self):
        return {
            "n_input": self.n_input,
            "n_kept": self.n_kept,
            "n_dropped": self.n_dropped,
            "required": list(self.required),
            "by_column": dict(self.by_column),
            "by_county": dict(self.by_county),
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n"

    def to_text(self) -> str:
        lines = [
            f"rows in: {self.n_input}",
            f"rows kept: {self.n_kept}",
            f"rows dropped: {self.n_dropped}",
        ]
        for col, n in self.by_column.items():
            lines.append(f"  missing {col}: {n}")
        lines.append(f"counties with drops: {len(self.by_county)}")
        return "\n".join(lines) + "\n"


def schema_columns(rows: Iterable[PanelRow]) -> set[str]:
    cols = set(CORE_COLUMNS)
    for r in rows:
        cols.update(r.covariates)
    return cols


def complete_case_filter(rows: Sequence[PanelRow], required: Iterable[str]):
    """Drop rows missing any required column.

    Returns
    -------
    kept : list of PanelRow
        The untouched input objects that have every required value.
    report : DropReport
        Per-column counts (a row missing two columns counts toward both)
        and per-county dropped-row counts.
    """
    required = tuple(sorted(set(required)))
    known = schema_columns(rows)
    unknown = [c for c in required if c not in known]
    if unknown:
        raise SchemaError(f"required column(s) not in schema: {', '.join(unknown)}")
    kept, dropped = [], []
    by_column: Counter = Counter()
    by_county: Counter = Counter()
    for r in rows:
        absent = [c for c in required if r.get(c) is None]
        if absent:
            dropped.append(r)
            by_column.update(absent)
            by_county[r.fips] += 1
        else:
            kept.append(r)
    report = DropReport(
        n_input=len(rows),
        n_kept=len(kept),
        required=required,
        by_column=dict(sorted(by_column.items())),
        by_county=dict(sorted(by_county.items())),
        dropped=dropped,
    )
    return kept, report


# ---------------------------------------------------------------------------
# model-ready panels


@dataclass(frozen=True, eq=False)
class Cluster:
    """All observations of one county, ordered by year."""

    fips: str
    years: np.ndarray
    y: np.ndarray
    X: np.ndarray
    offset: np.ndarray
    urban_code: tuple = ()

    def __post_init__(self):
        n = len(self.years)
        if n < 1:
            raise ValueError("a cluster needs at least one observation")
        if not (len(self.y) == self.X.shape[0] == len(self.offset) == n):
            raise ValueError(f"cluster {self.fips}: inconsistent row counts")
        if n > 1 and np.any(np.diff(self.years) <= 0):
            raise ValueError(f"cluster {self.fips}: years must be strictly increasing")

    @property
    def n(self) -> int:
        return len(self.years)


@dataclass(frozen=True, eq=False)
class PanelDataset:
    """Immutable clustered dataset: clusters sorted by fips, rows by year."""

    clusters: tuple[Cluster, ...]
    schema: tuple[str, ...]
    referents: dict = field(default_factory=dict)
    mode: str = "rate"
    covariates: tuple[str, ...] = ()

    @property
    def p(self) -> int:
        return len(self.schema)

    @property
    def n_clusters(self) -> int:
        return len(self.clusters)

    @cached_property
    def sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clusters], dtype=np.int64)

    @property
    def n_obs(self) -> int:
        return int(self.sizes.sum())

    @cached_property
    def starts(self) -> np.ndarray:
        return np.concatenate([[0], np.cumsum(self.sizes)[:-1]]).astype(np.int64)

    @cached_property
    def X(self) -> np.ndarray:
        if not self.clusters:
            return np.empty((0, self.p))
        return np.vstack([c.X for c in self.clusters])

    @cached_property
    def y(self) -> np.ndarray:
        if not self.clusters:
            return np.empty(0)
        return np.concatenate([c.y for c in self.clusters])

    @cached_property
    def offset(self) -> np.ndarray:
        if not self.clusters:
            return np.empty(0)
        return np.concatenate([c.offset for c in self.clusters])

    @cached_property
    def years(self) -> np.ndarray:
        if not self.clusters:
            return np.empty(0, dtype=np.int64)
        return np.concatenate([c.years for c in self.clusters])

    @cached_property
    def cluster_index(self) -> np.ndarray:
        return np.repeat(np.arange(self.n_clusters), self.sizes)

    @property
    def fips(self) -> list[str]:
        return [c.fips for c in self.clusters]

    def fingerprint(self) -> str:
        """SHA-256 over schema, keys and every numeric array."""
        h = hashlib.sha256()
        h.update(json.dumps([list(self.schema), self.mode, self.fips]).encode())
        for arr in (self.years, self.y, self.X, self.offset):
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def subset(self, indices: Sequence[int], relabel: bool = False) -> "PanelDataset":
        """Dataset built from the given cluster positions (repeats allowed).

        With ``relabel`` each drawn cluster gets a distinct identifier so
        repeated draws stay separate clusters.
        """
        picked = []
        for k, i in enumerate(indices):
            c = self.clusters[i]
            if relabel:
                c = Cluster(f"{c.fips}#{k}", c.years, c.y, c.X, c.offset, c.urban_code)
            picked.append(c)
        return PanelDataset(tuple(picked), self.schema, dict(self.referents), self.mode, self.covariates)


def build_panel(rows: Sequence[PanelRow], spec: ModelSpec, mode: str = "rate") -> PanelDataset:
    """Assemble the design matrix and group rows into county clusters.

    Column order is intercept, urban-code indicators, year indicators,
    then continuous covariates in ``spec`` order. The urban-code columns
    always cover every non-referent level; year columns cover the years
    present in ``rows`` other than the referent year.

    In ``"rate"`` mode the response is ``jail_rate`` with zero offset; in
    ``"count"`` mode it is ``jail_count`` (or rate x population / 1e5) with
    offset ``log(population / 1e5)``.
    """
    if mode not in ("rate", "count"):
        raise ValueError(f"unknown mode {mode!r}; expected 'rate' or 'count'")
    known = schema_columns(rows)
    unknown = [c for c in spec.covariates if c not in known]
    if unknown:
        raise SchemaError(f"model {spec.name!r}: unknown covariate(s): {', '.join(unknown)}")
    required = spec.required_columns(mode)

    ordered = sorted(rows, key=lambda r: (r.fips, r.year))
    for a, b in zip(ordered, ordered[1:]):
        if a.fips == b.fips and a.year == b.year:
            raise IngestError(f"duplicate county-year ({a.fips}, {a.year})")
    for r in ordered:
        absent = [c for c in sorted(required) if r.get(c) is None]
        if absent:
            raise IngestError(
                f"row {r.fips}/{r.year} (line {r.line}) is missing {', '.join(absent)}; "
                "apply complete_case_filter first"
            )
        if spec.urban_code and r.urban_code not in URBAN_LEVELS:
            raise IngestError(f"row {r.fips}/{r.year}: unknown urban_code {r.urban_code!r}")

    schema = [INTERCEPT]
    urban_levels = spec.urban_indicator_levels if spec.urban_code else ()
    schema += [urban_term(lvl) for lvl in urban_levels]
    year_levels: list[int] = []
    if spec.year:
        present = sorted({r.year for r in ordered})
        ref_year = int(spec.referents["year"])
        if ordered and ref_year not in present:
            raise SchemaError(
                f"referent year {ref_year} does not occur in the data; set referents.year"
            )
        year_levels = [yr for yr in present if yr != ref_year]
        schema += [year_term(yr) for yr in year_levels]
    schema += list(spec.covariates)

    n = len(ordered)
    X = np.zeros((n, len(schema)))
    X[:, 0] = 1.0
    col = 1
    codes = [r.urban_code for r in ordered]
    for lvl in urban_levels:
        X[:, col] = [c == lvl for c in codes]
        col += 1
    years = np.array([r.year for r in ordered], dtype=np.int64)
    for yr in year_levels:
        X[:, col] = years == yr
        col += 1
    for name in spec.covariates:
        X[:, col] = [r.covariates[name] for r in ordered]
        col += 1

    if mode == "rate":
        y = np.array([r.jail_rate for r in ordered], dtype=float)
        offset = np.zeros(n)
    else:
        pops = np.array([r.population for r in ordered], dtype=float)
        if np.any(pops <= 0):
            raise IngestError("count mode requires positive population on every row")
        y = np.array(
            [
                r.jail_count if r.jail_count is not None else r.jail_rate * r.population / RATE_SCALE
                for r in ordered
            ],
            dtype=float,
        )
        offset = np.log(pops / RATE_SCALE)
    if np.any(y < 0):
        raise IngestError("responses must be non-negative")

    clusters = []
    start = 0
    while start < n:
        stop = start
        fips = ordered[start].fips
        while stop < n and ordered[stop].fips == fips:
            stop += 1
        sl = slice(start, stop)
        clusters.append(
            Cluster(fips, years[sl].copy(), y[sl].copy(), X[sl].copy(), offset[sl].copy(), tuple(codes[sl]))
        )
        start = stop
    refs = {"urban_code": spec.referents["urban_code"], "year": int(spec.referents["year"])}
    return PanelDataset(tuple(clusters), tuple(schema), refs, mode, tuple(spec.covariates))


def panel_to_rows(data: PanelDataset) -> list[PanelRow]:
    """Invert :func:`build_panel` back to ingest rows (for export)."""
    cov_idx = [data.schema.index(c) for c in data.covariates]
    rows = []
    for c in data.clusters:
        for j in range(c.n):
            covs = {name: float(c.X[j, k]) for name, k in zip(data.covariates, cov_idx)}
            code = c.urban_code[j] if c.urban_code else None
            if data.mode == "rate":
                rows.append(PanelRow(c.fips, int(c.years[j]), float(c.y[j]), None, code, covs))
            else:
                pop = int(round(math.exp(c.offset[j]) * RATE_SCALE))
                rate = compute_rate(float(c.y[j]), pop)
                rows.append(PanelRow(c.fips, int(c.years[j]), rate, pop, code, covs, float(c.y[j])))
    return rows
