import json
import shutil
from pathlib import Path

import numpy as np
import pytest
import yaml

from panelgee.cli import main
from panelgee.ingest import write_csv
from panelgee.ingest import PanelRow

SIM = {
    "n_clusters": 60,
    "periods": 4,
    "intercept": 5.0,
    "sigma_b": 0.4,
    "urban_effects": {"large_metro_urban": -0.3, "small_mid_metro": 0.1},
    "year_effects": {2001: 0.05, 2002: 0.1, 2003: 0.0},
    "covariates": [
        {"name": "POVERTY_PERCENT", "beta": 0.02, "mean": 15, "sd": 5},
        {"name": "BLACK_PERCENT", "beta": 0.01, "mean": 10, "sd": 8},
    ],
    "missing_rate": 0.02,
    "layout": "grid",
}

MODELS = [
    {"preset": "urban_code"},
    {"name": "urban_year", "year": True},
    {"name": "poverty", "year": True, "covariates": ["POVERTY_PERCENT"]},
    {"name": "flat", "urban_code": False},
]


def write_config(tmp_path, **overrides):
    doc = {
        "output": "out",
        "seed": 7,
        "permutations": 99,
        "bins": 4,
        "data": {"panel": "{out}/panel.csv", "adjacency": "{out}/adjacency.csv", "geometry": "{out}/counties.geojson"},
        "models": MODELS,
        "nested": ["urban_code", "urban_year", "poverty"],
        "residual_model": "poverty",
        "simulate": dict(SIM),
    }
    for k, v in overrides.items():
        if v is None:
            doc.pop(k, None)
        else:
            doc[k] = v
    path = tmp_path / "run.config"
    path.write_text(yaml.safe_dump(doc, sort_keys=False))
    return path


@pytest.fixture
def simulated(tmp_path):
    cfg = write_config(tmp_path)
    assert main(["simulate", "--config", str(cfg)]) == 0
    return cfg, tmp_path / "out"


def run(cmd, cfg, *extra):
    return main([cmd, "--config", str(cfg), *extra])


class TestSimulate:
    def test_outputs_and_truth(self, simulated, capsys):
        cfg, out = simulated
        for name in ("panel.csv", "sim_truth.json", "adjacency.csv", "counties.geojson"):
            assert (out / name).exists()
        truth = json.loads((out / "sim_truth.json").read_text())
        assert truth["marginal_intercept"] == pytest.approx(5.0 + 0.08)
        assert truth["seed"] == 7

    def test_seed_reproducible(self, tmp_path):
        cfg = write_config(tmp_path)
        assert run("simulate", cfg, "--out", str(tmp_path / "a")) == 0
        assert run("simulate", cfg, "--out", str(tmp_path / "b")) == 0
        assert run("simulate", cfg, "--out", str(tmp_path / "c"), "--seed", "8") == 0
        a, b, c = ((tmp_path / d / "panel.csv").read_bytes() for d in "abc")
        assert a == b and a != c

    def test_zero_clusters_is_config_error(self, tmp_path):
        cfg = write_config(tmp_path, simulate=dict(SIM, n_clusters=0))
        assert run("simulate", cfg) == 2

    def test_missing_block(self, tmp_path):
        assert run("simulate", write_config(tmp_path, simulate=None)) == 2


class TestValidate:
    def test_clean_simulated_panel(self, simulated):
        cfg, out = simulated
        assert run("validate", cfg) == 0
        report = json.loads((out / "validation.json").read_text())
        assert report["violations"] == []
        drops = json.loads((out / "drop_report.json").read_text())
        assert drops["n_dropped"] > 0

    def test_out_of_range_percent(self, simulated):
        cfg, out = simulated
        lines = (out / "panel.csv").read_text().splitlines()
        header = lines[0].split(",")
        col = header.index("POVERTY_PERCENT")
        cells = lines[3].split(",")
        cells[col] = "150"
        lines[3] = ",".join(cells)
        (out / "panel.csv").write_text("\n".join(lines) + "\n")
        assert run("validate", cfg) == 1
        text = (out / "validation.txt").read_text()
        assert "line 4" in text and "POVERTY_PERCENT" in text

    def test_missing_file(self, tmp_path):
        assert run("validate", write_config(tmp_path)) == 2

    def test_missing_config(self, tmp_path):
        assert run("validate", tmp_path / "nope.config") == 2


class TestFit:
    def test_urban_code_table(self, simulated, capsys):
        cfg, out = simulated
        assert run("fit", cfg, "--model", "urban_code") == 0
        doc = json.loads((out / "fit_urban_code.json").read_text())
        assert len([r for r in doc["rows"] if not r["referent"]]) == 4
        assert doc["rows"][1]["term"] == "URBAN_CODE: rural" and doc["rows"][1]["referent"]
        foot = doc["footer"]
        assert foot["clusters"] == 60 and foot["converged"]
        assert set(foot) >= {"N", "QIC", "alpha", "phi", "iterations"}
        text = capsys.readouterr().out
        assert "Rural*" in text and "QIC" in text

    def test_unknown_model(self, simulated):
        assert run("fit", simulated[0], "--model", "nope") == 2

    def test_rank_deficient_names_columns(self, tmp_path, caplog):
        rows = [
            PanelRow(f"{g:05d}", 2000 + t, 100.0 + 7 * g + t * t, 10_000, "rural",
                     {"POVERTY_PERCENT": float(g + t), "UNEMPLOYMENT_PERCENT": float(g + t)})
            for g in range(1, 9) for t in range(3)
        ]
        write_csv(rows, tmp_path / "p.csv", ["POVERTY_PERCENT", "UNEMPLOYMENT_PERCENT"])
        cfg = write_config(
            tmp_path,
            data={"panel": str(tmp_path / "p.csv")},
            models=[{"name": "dup", "urban_code": False, "covariates": ["POVERTY_PERCENT", "UNEMPLOYMENT_PERCENT"]}],
            nested=None, residual_model=None, simulate=None,
        )
        assert run("fit", cfg) == 1
        assert "UNEMPLOYMENT_PERCENT" in caplog.text

    def test_singleton_clusters_correlation_irrelevant(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = [
            PanelRow(f"{g:05d}", 2005, float(rng.poisson(300)), 100_000,
                     ("rural", "small_mid_metro", "large_metro_suburban", "large_metro_urban")[g % 4], {})
            for g in range(1, 41)
        ]
        write_csv(rows, tmp_path / "p.csv", [])
        models = [{"name": "ind", "correlation": "independence"}, {"name": "exch", "correlation": "exchangeable"}]
        cfg = write_config(tmp_path, data={"panel": str(tmp_path / "p.csv")}, models=models,
                           nested=None, residual_model=None, simulate=None)
        assert run("fit", cfg, "--model", "ind") == 0
        assert run("fit", cfg, "--model", "exch") == 0
        a = json.loads((tmp_path / "out" / "fit_ind.json").read_text())
        b = json.loads((tmp_path / "out" / "fit_exch.json").read_text())
        assert a["rows"] == b["rows"]
        assert a["footer"]["QIC"] == b["footer"]["QIC"]


class TestNested:
    def test_ladder(self, simulated):
        cfg, out = simulated
        assert run("nested", cfg) == 0
        doc = json.loads((out / "nested.json").read_text())
        names = [m["model"] for m in doc["models"]]
        assert names == ["urban_code", "urban_year", "poverty"]
        assert len({m["footer"]["N"] for m in doc["models"]}) == 1
        text = (out / "nested.txt").read_text()
        assert "*" in text and "QIC" in text

    def test_single_model_rejected(self, simulated):
        cfg, out = simulated
        doc = yaml.safe_load(cfg.read_text())
        doc["nested"] = ["urban_code"]
        cfg.write_text(yaml.safe_dump(doc))
        assert run("nested", cfg) == 2

    def test_tables_equal_fit_tables(self, tmp_path):
        cfg = write_config(tmp_path, simulate=dict(SIM, missing_rate=0.0))
        assert run("simulate", cfg) == 0
        assert run("nested", cfg) == 0
        out = tmp_path / "out"
        for name in ("urban_code", "urban_year", "poverty"):
            assert run("fit", cfg, "--model", name) == 0
            assert (out / f"nested_{name}.json").read_text() == (out / f"fit_{name}.json").read_text()


class TestResiduals:
    def test_all_outputs(self, simulated, capsys):
        cfg, out = simulated
        assert run("residuals", cfg) == 0
        for name in ("residuals_poverty.csv", "residuals_poverty.geojson", "moran_poverty.json"):
            assert (out / name).exists()
        moran = json.loads((out / "moran_poverty.json").read_text())
        assert 0 < moran["p_value"] <= 1 and moran["permutations"] == 99
        geo = json.loads((out / "residuals_poverty.geojson").read_text())
        assert len(geo["features"]) == 60
        assert "Moran's I" in capsys.readouterr().out

    def test_csv_only_without_spatial_inputs(self, simulated, caplog):
        cfg, out = simulated
        doc = yaml.safe_load(cfg.read_text())
        doc["data"] = {"panel": "{out}/panel.csv"}
        cfg.write_text(yaml.safe_dump(doc))
        assert run("residuals", cfg) == 0
        assert (out / "residuals_poverty.csv").exists()
        assert not (out / "moran_poverty.json").exists()
        assert "adjacency" in caplog.text

    def test_constant_residuals(self, tmp_path):
        rows = [
            PanelRow(f"{g:05d}", 2000 + t, (10.0, 20.0)[t], 100_000, "rural", {})
            for g in range(1, 5) for t in range(2)
        ]
        write_csv(rows, tmp_path / "p.csv", [])
        (tmp_path / "adj.csv").write_text("00001,00002\n00002,00004\n00003,00004\n00001,00003\n")
        cfg = write_config(
            tmp_path, data={"panel": str(tmp_path / "p.csv"), "adjacency": str(tmp_path / "adj.csv")},
            models=[{"name": "flat", "urban_code": False}], nested=None, residual_model=None, simulate=None,
        )
        assert run("residuals", cfg, "--model", "flat") == 1
        assert "zero variance" in (tmp_path / "out" / "moran_flat.json").read_text()


def test_pipeline_byte_identical(tmp_path):
    outs = []
    for d in ("one", "two"):
        (tmp_path / d).mkdir()
        cfg = write_config(tmp_path / d)
        for cmd in ("simulate", "validate", "nested", "residuals"):
            assert run(cmd, cfg) == 0
        outs.append(tmp_path / d / "out")
    files = sorted(p.name for p in outs[0].iterdir())
    assert files == sorted(p.name for p in outs[1].iterdir())
    for name in files:
        assert (outs[0] / name).read_bytes() == (outs[1] / name).read_bytes(), name


def test_shipped_config_parses():
    from panelgee.config import load_config
    from panelgee.modelspec import RACE_ETHNICITY_COVARIATES

    cfg = load_config(Path(__file__).parents[1] / "configs" / "table-a1.config")
    assert [m.name for m in cfg.ladder()] == ["urban_code", "urban_code_year", "full"]
    assert cfg.model("residual").covariates == tuple(
        c for c in cfg.model("full").covariates
        if c not in RACE_ETHNICITY_COVARIATES
    )
    assert cfg.sim_config().n_clusters == 2858
