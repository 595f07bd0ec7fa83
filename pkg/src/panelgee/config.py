"""Run configuration: one YAML document drives every CLI command."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import yaml

from .errors import ConfigError
from .ingest import DEFAULT_WINDOW
from .modelspec import ModelSpec, residual_model, reference_ladder
from .simulate import SimConfig

PRESETS = {s.name: s for s in reference_ladder()}
PRESETS["residual"] = residual_model()

_MODEL_KEYS = {"name", "preset", "urban_code", "year", "covariates", "correlation", "referents", "fixed_alpha"}


def _model(entry: Any, tol: float, max_iter: int) -> ModelSpec:
    if isinstance(entry, str):
        entry = {"preset": entry}
    if not isinstance(entry, dict):
        raise ConfigError(f"model entries must be mappings or preset names, got {entry!r}")
    unknown = set(entry) - _MODEL_KEYS
    if unknown:
        raise ConfigError(f"unknown model key(s): {', '.join(sorted(unknown))}")
    entry = dict(entry)
    preset = entry.pop("preset", None)
    if preset is not None:
        if preset not in PRESETS:
            raise ConfigError(f"unknown model preset {preset!r}; known: {', '.join(PRESETS)}")
        base = PRESETS[preset]
        entry.setdefault("name", base.name)
        entry.setdefault("urban_code", base.urban_code)
        entry.setdefault("year", base.year)
        entry.setdefault("covariates", list(base.covariates))
    if "name" not in entry:
        raise ConfigError("every model needs a name")
    try:
        return ModelSpec(tol=tol, max_iter=max_iter, **entry)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"model {entry.get('name')!r}: {exc}") from exc


@dataclass
class RunConfig:
    base_dir: Path
    output: Path
    panel: Path | None = None
    adjacency: Path | None = None
    geometry: Path | None = None
    fips_property: str = "fips"
    schema: dict = field(default_factory=dict)
    window: tuple[int, int] = DEFAULT_WINDOW
    mode: str = "rate"
    seed: int = 0
    threads: int = 1
    tolerance: float = 1e-8
    max_iter: int = 100
    permutations: int = 999
    bins: int = 5
    row_standardize: bool = False
    models: list[ModelSpec] = field(default_factory=list)
    nested: list[str] = field(default_factory=list)
    residual_model: str | None = None
    simulate: dict | None = None
    simulate_output: Path | None = None
    simulate_layout: str | None = None

    def model(self, name: str | None) -> ModelSpec:
        if name is None:
            if not self.models:
                raise ConfigError("config declares no models")
            return self.models[0]
        for m in self.models:
            if m.name == name:
                return m
        raise ConfigError(f"model {name!r} not in config; have {', '.join(m.name for m in self.models)}")

    def ladder(self) -> list[ModelSpec]:
        names = self.nested or [m.name for m in self.models]
        return [self.model(n) for n in names]

    def sim_config(self) -> SimConfig:
        if self.simulate is None:
            raise ConfigError("config has no 'simulate' block")
        block = dict(self.simulate)
        block.setdefault("seed", self.seed)
        return SimConfig.from_dict(block)

    def require(self, *attrs: str) -> None:
        for a in attrs:
            path = getattr(self, a)
            if path is None:
                raise ConfigError(f"config does not set data.{a}")
            if not Path(path).exists():
                raise ConfigError(f"data.{a} file not found: {path}")


def load_config(path, out: str | None = None, seed: int | None = None, threads: int | None = None) -> RunConfig:
    """Parse a run config; ``out``/``seed``/``threads`` override the file."""
    path = Path(path)
    try:
        raw = yaml.safe_load(path.read_text(encoding="utf-8")) or {}
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    except yaml.YAMLError as exc:
        raise ConfigError(f"config {path} is not valid YAML: {exc}") from exc
    if not isinstance(raw, dict):
        raise ConfigError("config root must be a mapping")
    base = path.resolve().parent

    output = Path(out) if out is not None else base / str(raw.get("output", "out"))

    def resolve(value):
        if value is None:
            return None
        text = str(value).replace("{out}", str(output))
        p = Path(text)
        return p if p.is_absolute() else base / p

    data = raw.get("data", {}) or {}
    tol = float(raw.get("tolerance", 1e-8))
    max_iter = int(raw.get("max_iter", 100))
    models = [_model(m, tol, max_iter) for m in raw.get("models", []) or []]
    names = [m.name for m in models]
    if len(set(names)) != len(names):
        raise ConfigError(f"model names must be unique: {names}")
    sim = raw.get("simulate")
    sim_out = None
    layout = None
    if sim is not None:
        sim = dict(sim)
        sim_out = resolve(sim.pop("output", "{out}/panel.csv"))
        layout = sim.pop("layout", None)
        if seed is not None:
            sim["seed"] = int(seed)
    mode = raw.get("mode", "rate")
    if mode not in ("rate", "count"):
        raise ConfigError(f"mode must be 'rate' or 'count', got {mode!r}")
    window = tuple(int(v) for v in data.get("window", DEFAULT_WINDOW))
    cfg = RunConfig(
        base_dir=base,
        output=output,
        panel=resolve(data.get("panel")),
        adjacency=resolve(data.get("adjacency")),
        geometry=resolve(data.get("geometry")),
        fips_property=str(data.get("fips_property", "fips")),
        schema=dict(data.get("schema", {}) or {}),
        window=window,
        mode=mode,
        seed=int(seed if seed is not None else raw.get("seed", 0)),
        threads=int(threads if threads is not None else raw.get("threads", 1)),
        tolerance=tol,
        max_iter=max_iter,
        permutations=int(raw.get("permutations", 999)),
        bins=int(raw.get("bins", 5)),
        row_standardize=bool(raw.get("row_standardize", False)),
        models=models,
        nested=list(raw.get("nested", []) or []),
        residual_model=raw.get("residual_model"),
        simulate=sim,
        simulate_output=sim_out,
        simulate_layout=layout,
    )
    for n in cfg.nested:
        cfg.model(n)
    if cfg.residual_model is not None:
        cfg.model(cfg.residual_model)
    return cfg
