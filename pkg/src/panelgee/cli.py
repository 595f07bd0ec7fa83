"""``panelgee`` command line: validate, fit, nested, residuals, simulate.

Exit codes: 0 success, 1 analysis or validation finding, 2 usage or
environment error.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import residual_geo as geo
from .config import RunConfig, load_config
from .errors import (
    ConfigError,
    FitError,
    IngestError,
    PanelGEEError,
    SchemaError,
    SpatialError,
    ZeroVarianceError,
)
from .inference import fit_model, ladder_required, nested_run
from .ingest import complete_case_filter, load_csv, validate
from .simulate import simulate_rows, write_panel_csv

logger = logging.getLogger("panelgee")

EXIT_OK, EXIT_FINDING, EXIT_USAGE = 0, 1, 2


def _write(path: Path, text: str) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text, encoding="utf-8")


def _dump(obj) -> str:
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _rows(cfg: RunConfig):
    cfg.require("panel")
    return load_csv(cfg.panel, cfg.schema)


def cmd_validate(cfg: RunConfig, args) -> int:
    rows = _rows(cfg)
    report = validate(rows, cfg.window)
    required = ladder_required(cfg.ladder(), cfg.mode) if cfg.models else {"jail_rate"}
    _, drops = complete_case_filter(rows, required)
    out = cfg.output
    _write(out / "validation.json", report.to_json())
    _write(out / "validation.txt", report.to_text())
    _write(out / "drop_report.json", drops.to_json())
    _write(out / "drop_report.txt", drops.to_text())
    sys.stdout.write(report.to_text())
    sys.stdout.write(drops.to_text())
    return EXIT_OK if report.ok else EXIT_FINDING


def cmd_fit(cfg: RunConfig, args) -> int:
    spec = cfg.model(args.model)
    rows = _rows(cfg)
    kept, _ = complete_case_filter(rows, spec.required_columns(cfg.mode))
    _, fit, table = fit_model(kept, spec, cfg.mode)
    _write(cfg.output / f"fit_{spec.name}.json", table.to_json())
    _write(cfg.output / f"fit_{spec.name}.txt", table.to_text())
    sys.stdout.write(table.to_text())
    if not fit.converged:
        logger.error("model %s did not converge; table shows the last iterate", spec.name)
        return EXIT_FINDING
    return EXIT_OK


def cmd_nested(cfg: RunConfig, args) -> int:
    ladder = cfg.ladder()
    if len(ladder) < 2:
        raise ConfigError("nested needs a ladder of at least two models")
    comp = nested_run(_rows(cfg), ladder, cfg.mode, cfg.threads)
    _write(cfg.output / "nested.json", comp.to_json())
    _write(cfg.output / "nested.txt", comp.to_text())
    _write(cfg.output / "nested_drop_report.json", comp.drop_report.to_json())
    for name, table in comp.models:
        _write(cfg.output / f"nested_{name}.json", table.to_json())
    sys.stdout.write(comp.to_text())
    return EXIT_OK if all(t.converged for _, t in comp.models) else EXIT_FINDING


def cmd_residuals(cfg: RunConfig, args) -> int:
    name = args.model or cfg.residual_model
    spec = cfg.model(name)
    rows = _rows(cfg)
    kept, _ = complete_case_filter(rows, spec.required_columns(cfg.mode))
    data, fit, _ = fit_model(kept, spec, cfg.mode)
    if not fit.converged:
        logger.error("model %s did not converge", spec.name)
        return EXIT_FINDING
    surface = geo.county_mean_residual(geo.response_residuals(data, fit), data, spec.name)
    values = [e.mean_residual for e in surface.entries.values()]
    binned = geo.quantile_bins(values, cfg.bins)
    bins = dict(zip(surface.entries, binned.bins.tolist()))
    cfg.output.mkdir(parents=True, exist_ok=True)
    surface.write_csv(cfg.output / f"residuals_{spec.name}.csv", bins)
    status = EXIT_OK

    if cfg.geometry is not None:
        cfg.require("geometry")
        doc, report = geo.export_geojson(surface, cfg.geometry, cfg.fips_property, cfg.bins)
        _write(cfg.output / f"residuals_{spec.name}.geojson", json.dumps(doc) + "\n")
        _write(cfg.output / f"geojson_{spec.name}_report.json", _dump(report.to_dict()))
        for w in report.warnings:
            logger.warning(w)
    else:
        logger.warning("no geometry configured; skipping GeoJSON export")

    if cfg.adjacency is not None:
        cfg.require("adjacency")
        graph = geo.load_adjacency(cfg.adjacency)
        try:
            res = geo.morans_i(
                surface.values(), graph, cfg.permutations, cfg.seed, cfg.row_standardize
            )
        except ZeroVarianceError as exc:
            _write(cfg.output / f"moran_{spec.name}.json", _dump({"error": str(exc)}))
            logger.error("Moran's I: %s", exc)
            return EXIT_FINDING
        doc = res.to_dict()
        doc.update(model=spec.name, row_standardized=cfg.row_standardize)
        _write(cfg.output / f"moran_{spec.name}.json", _dump(doc))
        sys.stdout.write(f"Moran's I = {res.I:.6f}, permutation p = {res.p_value:.4f} ({res.permutations} permutations)\n")
    else:
        logger.warning("no adjacency configured; skipping Moran's I")
    sys.stdout.write(f"residual surface: {len(surface)} counties ({spec.name})\n")
    return status


def cmd_simulate(cfg: RunConfig, args) -> int:
    sim = cfg.sim_config()
    target = cfg.simulate_output or cfg.output / "panel.csv"
    target.parent.mkdir(parents=True, exist_ok=True)
    write_panel_csv(sim, target)
    truth = {
        "seed": sim.seed,
        "n_clusters": sim.n_clusters,
        "periods": sim.periods,
        "sigma_b": sim.sigma_b,
        "conditional_intercept": sim.intercept,
        "marginal_intercept": sim.intercept + 0.5 * sim.sigma_b ** 2,
        "urban_effects": dict(sim.urban_effects),
        "year_effects": {str(k): v for k, v in sim.year_effects.items()},
        "covariates": {c.name: c.beta for c in sim.covariates},
    }
    _write(target.parent / "sim_truth.json", _dump(truth))
    if cfg.simulate_layout == "grid":
        fips = sorted({r.fips for r in simulate_rows(sim)}) if sim.n_clusters else []
        edges, doc = geo.grid_layout(fips)
        _write(target.parent / "adjacency.csv", "fips_a,fips_b\n" + "".join(f"{a},{b}\n" for a, b in edges))
        _write(target.parent / "counties.geojson", json.dumps(doc) + "\n")
    sys.stdout.write(f"wrote {target}\n")
    sys.stdout.write(_dump(truth))
    return EXIT_OK


COMMANDS = {
    "validate": cmd_validate,
    "fit": cmd_fit,
    "nested": cmd_nested,
    "residuals": cmd_residuals,
    "simulate": cmd_simulate,
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="panelgee", description=__doc__.splitlines()[0])
    parser.add_argument("command", choices=sorted(COMMANDS))
    parser.add_argument("--config", required=True, help="YAML run configuration")
    parser.add_argument("--model", help="model name from the config")
    parser.add_argument("--out", help="output directory (overrides the config)")
    parser.add_argument("--seed", type=int, help="random seed (overrides the config)")
    parser.add_argument("--threads", type=int, help="worker cap for ladder/bootstrap fits")
    parser.add_argument("-v", "--verbose", action="store_true")
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s: %(message)s",
    )
    try:
        cfg = load_config(args.config, out=args.out, seed=args.seed, threads=args.threads)
        return COMMANDS[args.command](cfg, args)
    except (ConfigError, IngestError, SchemaError, OSError) as exc:
        logger.error("%s", exc)
        return EXIT_USAGE
    except SpatialError as exc:
        logger.error("%s", exc)
        return EXIT_FINDING if isinstance(exc, ZeroVarianceError) else EXIT_USAGE
    except FitError as exc:
        logger.error("%s", exc)
        cols = getattr(exc, "columns", None)
        if cols:
            logger.error("offending columns: %s", ", ".join(cols))
        return EXIT_FINDING
    except PanelGEEError as exc:
        logger.error("%s", exc)
        return EXIT_FINDING


if __name__ == "__main__":
    sys.exit(main())
