import csv
import math

import numpy as np
import pytest

from panelgee.ingest import PanelRow, build_panel
from panelgee.modelspec import ALL_COVARIATES, ModelSpec

_criteria = {}


def pytest_configure(config):
    config.addinivalue_line("markers", "criterion(number, title): acceptance criterion")


def pytest_runtest_logreport(report):
    if report.when != "call" and not (report.when == "setup" and report.outcome != "passed"):
        return
    crit = getattr(report, "criterion", None)
    if crit is None:
        return
    prev = _criteria.get(crit, "PASS")
    _criteria[crit] = "PASS" if prev == "PASS" and report.outcome == "passed" else "FAIL"


@pytest.hookimpl(hookwrapper=True)
def pytest_runtest_makereport(item, call):
    outcome = yield
    rep = outcome.get_result()
    marker = item.get_closest_marker("criterion")
    if marker is not None:
        rep.criterion = marker.args


def pytest_terminal_summary(terminalreporter):
    if not _criteria:
        return
    terminalreporter.section("acceptance criteria")
    for (number, title), status in sorted(_criteria.items()):
        terminalreporter.write_line(f"AC{number:>2} {status}  {title}")


def make_dataset(X, y, cluster_ids, years=None, offset=None, names=None):
    """PanelDataset straight from arrays, bypassing CSV ingest."""
    from panelgee.ingest import Cluster, PanelDataset

    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    cluster_ids = np.asarray(cluster_ids)
    n, p = X.shape
    offset = np.zeros(n) if offset is None else np.asarray(offset, dtype=float)
    if years is None:
        years = np.zeros(n, dtype=np.int64)
        for g in np.unique(cluster_ids):
            idx = np.flatnonzero(cluster_ids == g)
            years[idx] = 2000 + np.arange(idx.size)
    years = np.asarray(years, dtype=np.int64)
    names = names or ["(Intercept)"] + [f"x{k}" for k in range(1, p)]
    clusters = []
    for g in sorted(np.unique(cluster_ids), key=lambda v: str(v)):
        idx = np.flatnonzero(cluster_ids == g)
        idx = idx[np.argsort(years[idx])]
        clusters.append(Cluster(str(g).zfill(5), years[idx], y[idx], X[idx], offset[idx]))
    return PanelDataset(tuple(clusters), tuple(names), {"urban_code": "rural", "year": 2000}, "rate", tuple(names[1:]))


@pytest.fixture
def make_data():
    return make_dataset


def random_poisson_panel(rng, n_clusters, max_size, p, sigma_b=0.3, offsets=False):
    sizes = rng.integers(1, max_size + 1, n_clusters)
    ids = np.repeat(np.arange(n_clusters), sizes)
    n = ids.size
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta = np.concatenate([[1.0], rng.normal(scale=0.3, size=p - 1)])
    off = rng.normal(scale=0.2, size=n) if offsets else np.zeros(n)
    b = rng.normal(scale=sigma_b, size=n_clusters)[ids]
    y = rng.poisson(np.exp(X @ beta + off + b)).astype(float)
    return X, y, ids, off


@pytest.fixture
def sample_rows():
    """Six county-years across two counties, every covariate present."""
    rows = []
    for k, (fips, code) in enumerate([("01001", "rural"), ("01003", "large_metro_suburban")]):
        for j, year in enumerate((2000, 2001, 2002)):
            covs = {name: float(1 + (i + 3 * j + k) % 7) for i, name in enumerate(ALL_COVARIATES)}
            rows.append(PanelRow(fips, year, 200.0 + 10 * j + 50 * k, 50_000 + k, code, covs, None, 2 + 3 * k + j))
    return rows


def write_rows_csv(path, header, rows):
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        w.writerows(rows)
    return path


@pytest.fixture
def write_csv_file(tmp_path):
    def _write(header, rows, name="panel.csv"):
        return write_rows_csv(tmp_path / name, header, rows)

    return _write
