import json

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from conftest import make_dataset
from oracles import grid_weights, moran_double_loop
from panelgee.engine import gee_fit
from panelgee.errors import SpatialError, ZeroVarianceError
from panelgee.modelspec import ModelSpec
from panelgee.residual_geo import (
    AdjacencyGraph,
    ResidualSurface,
    SurfaceEntry,
    county_mean_residual,
    export_geojson,
    grid_layout,
    load_adjacency,
    morans_i,
    quantile_bins,
    response_residuals,
)


def fixed_fit(data, mu):
    """A fit on ``data`` whose fitted means are the constant ``mu``."""
    fit = gee_fit(make_dataset(np.ones((3, 1)), [1.0, 2.0, 3.0], [0, 1, 2]), ModelSpec(urban_code=False))
    import dataclasses

    return dataclasses.replace(fit, beta=np.array([np.log(mu)]), n_obs=data.n_obs)


def grid_graph(rows, cols):
    keys = [f"{i:05d}" for i in range(rows * cols)]
    W = grid_weights(rows, cols)
    edges = [(keys[i], keys[j]) for i, j in zip(*np.nonzero(np.triu(W)))]
    return keys, AdjacencyGraph.from_edges(edges), W


class TestResiduals:
    @pytest.mark.parametrize("y,mu,expected", [(250.0, 250.0, 0.0), (300.0, 250.0, 50.0), (100.0, 250.0, -150.0)])
    def test_sign_convention(self, y, mu, expected):
        data = make_dataset(np.ones((1, 1)), [y], [0])
        r = response_residuals(data, fixed_fit(data, mu))
        assert r[0] == pytest.approx(expected, abs=1e-9)

    def test_dimension_mismatch(self):
        data = make_dataset(np.ones((2, 1)), [1.0, 2.0], [0, 1])
        fit = gee_fit(make_dataset(np.ones((3, 1)), [1.0, 2.0, 3.0], [0, 1, 2]), ModelSpec(urban_code=False))
        with pytest.raises(ValueError):
            response_residuals(data, fit)

    def test_county_means(self):
        data = make_dataset(np.ones((3, 1)), [5.0, 5.0, 7.0], ["00002", "00002", "00001"])
        surface = county_mean_residual(np.array([4.0, -10.0, 10.0]), data, "m")
        assert list(surface.entries) == ["00001", "00002"]
        assert surface.entries["00002"].mean_residual == 0.0
        assert surface.entries["00002"].n_years == 2
        assert surface.entries["00001"].mean_residual == 4.0
        assert surface.entries["00001"].mean_expected == 3.0
        assert surface.model == "m"

    def test_sum_and_difference_invariants(self):
        rng = np.random.default_rng(4)
        ids = np.repeat(np.arange(30), rng.integers(1, 15, 30))
        X = np.column_stack([np.ones(ids.size), rng.normal(size=ids.size)])
        y = rng.poisson(np.exp(3 + 0.2 * X[:, 1])).astype(float)
        data = make_dataset(X, y, ids)
        fit = gee_fit(data, ModelSpec())
        r = response_residuals(data, fit)
        surface = county_mean_residual(r, data)
        total = sum(e.mean_residual * e.n_years for e in surface.entries.values())
        assert total == pytest.approx(r.sum(), abs=1e-8)
        for e in surface.entries.values():
            assert e.n_years >= 1
            assert abs(e.mean_residual - (e.mean_observed - e.mean_expected)) < 1e-10

    def test_csv(self, tmp_path):
        s = ResidualSurface({"00001": SurfaceEntry(2.0, 1.5, 0.5, 3)}, "m")
        s.write_csv(tmp_path / "s.csv", bins={"00001": 0})
        lines = (tmp_path / "s.csv").read_text().splitlines()
        assert lines == ["fips,n_years,mean_observed,mean_expected,mean_residual,bin", "00001,3,2.0,1.5,0.5,0"]


class TestQuantileBins:
    def test_quartiles(self):
        b = quantile_bins(np.arange(1, 101), 4)
        assert np.bincount(b.bins).tolist() == [25, 25, 25, 25]
        assert not b.collapsed

    def test_all_equal_collapses(self):
        b = quantile_bins([3.0] * 10, 4)
        assert np.unique(b.bins).size == 1
        assert b.collapsed and b.message

    def test_three_values(self):
        assert quantile_bins([1, 2, 3], 3).bins.tolist() == [0, 1, 2]

    def test_validation(self):
        with pytest.raises(ValueError):
            quantile_bins([1, 2], 1)
        with pytest.raises(ValueError):
            quantile_bins([], 3)

    @given(st.lists(st.integers(-5, 5), min_size=1, max_size=60), st.integers(2, 7))
    def test_ties_share_bin_and_order_is_kept(self, vals, k):
        b = quantile_bins(vals, k).bins
        v = np.array(vals)
        for x in np.unique(v):
            assert np.unique(b[v == x]).size == 1
        order = np.argsort(v, kind="stable")
        assert np.all(np.diff(b[order]) >= 0)
        assert b.min() >= 0 and b.max() <= k - 1


class TestAdjacency:
    def test_symmetric_from_edges(self):
        g = AdjacencyGraph.from_edges([("1", "2"), ("2", "3"), ("2", "1")])
        assert g.neighbors == {"1": ("2",), "2": ("1", "3"), "3": ("2",)}

    def test_self_loop(self):
        with pytest.raises(SpatialError):
            AdjacencyGraph.from_edges([("1", "1")])

    def test_load(self, tmp_path):
        p = tmp_path / "adj.csv"
        p.write_text("00001,00002\n00002,00003\n")
        g = load_adjacency(p)
        assert g.neighbors["00002"] == ("00001", "00003")

    def test_load_missing(self, tmp_path):
        with pytest.raises(SpatialError):
            load_adjacency(tmp_path / "nope.csv")

    def test_row_standardized_weights(self):
        keys, g, _ = grid_graph(2, 3)
        W = g.weights(keys, row_standardize=True).toarray()
        np.testing.assert_allclose(W.sum(axis=1), 1.0)


class TestMoran:
    def test_checkerboard(self):
        keys, g, _ = grid_graph(2, 2)
        res = morans_i(dict(zip(keys, [1.0, -1.0, -1.0, 1.0])), g, permutations=0)
        assert res.I == -1.0
        assert res.p_value is None

    def test_zero_variance(self):
        keys, g, _ = grid_graph(2, 2)
        with pytest.raises(ZeroVarianceError):
            morans_i(dict.fromkeys(keys, 2.0), g)

    def test_disconnected_keys_listed(self):
        keys, g, _ = grid_graph(2, 2)
        vals = dict(zip(keys, [1.0, 2.0, 3.0, 4.0]))
        vals["99999"] = 5.0
        with pytest.raises(SpatialError, match="99999"):
            morans_i(vals, g)

    def test_too_few(self):
        g = AdjacencyGraph.from_edges([("a", "b")])
        with pytest.raises(SpatialError):
            morans_i({"a": 1.0, "b": 2.0}, g)

    @pytest.mark.parametrize("seed", range(10))
    def test_double_loop_oracle(self, seed):
        rng = np.random.default_rng(seed)
        rows, cols = int(rng.integers(2, 7)), int(rng.integers(2, 7))
        keys, g, W = grid_graph(rows, cols)
        x = rng.normal(size=rows * cols)
        res = morans_i(dict(zip(keys, x)), g, permutations=0)
        assert abs(res.I - moran_double_loop(x, W)) < 1e-12
        assert abs(res.I) <= 1.5

    @settings(max_examples=50, deadline=None)
    @given(st.integers(0, 2**31), st.floats(-100, 100).filter(lambda a: abs(a) > 1e-3), st.floats(-1e3, 1e3))
    def test_affine_invariance(self, seed, a, b):
        rng = np.random.default_rng(seed)
        keys, g, _ = grid_graph(4, 5)
        x = rng.normal(size=20)
        i0 = morans_i(dict(zip(keys, x)), g, permutations=0).I
        i1 = morans_i(dict(zip(keys, a * x + b)), g, permutations=0).I
        assert abs(i0 - i1) < 1e-10

    def test_permutations_reproducible(self):
        keys, g, _ = grid_graph(5, 5)
        vals = dict(zip(keys, np.arange(25.0)))
        r1 = morans_i(vals, g, permutations=499, seed=3)
        r2 = morans_i(vals, g, permutations=499, seed=3)
        assert r1 == r2
        # a smooth gradient is strongly positively autocorrelated
        assert r1.I > 0.5 and r1.p_value == pytest.approx(1 / 500)

    def test_p_value_bounds(self):
        keys, g, _ = grid_graph(3, 3)
        rng = np.random.default_rng(0)
        res = morans_i(dict(zip(keys, rng.normal(size=9))), g, permutations=99, seed=1)
        assert 1 / 100 <= res.p_value <= 1.0
        assert (res.p_value * 100) == pytest.approx(round(res.p_value * 100))


def toy_geometry(fips):
    return grid_layout(fips)[1]


class TestGeoJSON:
    def surface(self, keys):
        return ResidualSurface({k: SurfaceEntry(1.0 + i, 0.5, 0.5 + i + 1 / 3, 2) for i, k in enumerate(keys)})

    def test_three_counties(self):
        keys = ["00001", "00002", "00003"]
        doc, rep = export_geojson(self.surface(keys), toy_geometry(keys), k=3)
        assert doc["type"] == "FeatureCollection"
        assert len(doc["features"]) == 3 and rep.matched == 3
        props = doc["features"][1]["properties"]
        assert set(props) >= {"fips", "mean_residual", "mean_observed", "mean_expected", "bin"}
        assert [f["properties"]["bin"] for f in doc["features"]] == [0, 1, 2]

    def test_unmatched_reported(self):
        doc, rep = export_geojson(self.surface(["00001", "00002", "00009"]), toy_geometry(["00001", "00002", "00003"]))
        assert rep.unmatched_surface == ["00009"]
        assert rep.unmatched_geometry == ["00003"]
        assert len(doc["features"]) == 2

    def test_empty_surface(self):
        doc, rep = export_geojson(ResidualSurface({}), toy_geometry(["00001"]))
        assert doc == {"type": "FeatureCollection", "features": []}
        assert rep.warnings

    def test_missing_property(self):
        geo = toy_geometry(["00001"])
        with pytest.raises(SpatialError):
            export_geojson(self.surface(["00001"]), geo, fips_property="GEOID")

    def test_unreadable_geometry(self, tmp_path):
        bad = tmp_path / "g.json"
        bad.write_text("{not json")
        with pytest.raises(SpatialError):
            export_geojson(self.surface(["00001"]), bad)
        with pytest.raises(SpatialError):
            export_geojson(self.surface(["00001"]), {"type": "Feature"})

    def test_numeric_fips_property(self):
        geo = toy_geometry(["00001"])
        geo["features"][0]["properties"]["fips"] = 1
        doc, rep = export_geojson(self.surface(["00001"]), geo)
        assert rep.matched == 1

    def test_round_trip_full_precision(self, tmp_path):
        rng = np.random.default_rng(2)
        keys = [f"{i:05d}" for i in range(12)]
        s = ResidualSurface({k: SurfaceEntry(*rng.normal(size=2), float(rng.normal()), 3) for k in keys})
        doc, _ = export_geojson(s, toy_geometry(keys))
        path = tmp_path / "out.geojson"
        path.write_text(json.dumps(doc))
        back = json.loads(path.read_text())
        for f in back["features"]:
            e = s.entries[f["properties"]["fips"]]
            assert f["properties"]["mean_residual"] == e.mean_residual
            assert f["properties"]["mean_observed"] == e.mean_observed


def test_grid_layout_edges():
    edges, geo = grid_layout(["a", "b", "c", "d"])
    assert sorted(edges) == [("a", "b"), ("a", "c"), ("b", "d"), ("c", "d")]
    assert len(geo["features"]) == 4
