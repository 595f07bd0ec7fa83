"""Declarative model descriptions and the fixed categorical codings."""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping

# Level order is part of the public contract: coefficient indices depend on it.
URBAN_LEVELS = ("rural", "small_mid_metro", "large_metro_suburban", "large_metro_urban")
# Non-referent indicator columns, in coefficient-table row order.
URBAN_INDICATORS = ("large_metro_suburban", "large_metro_urban", "small_mid_metro")

URBAN_LABELS = {
    "rural": "Rural",
    "small_mid_metro": "Small and Mid Metros",
    "large_metro_suburban": "Large Metro, Suburban",
    "large_metro_urban": "Large Metro, Urban",
}

JAIL_COVARIATES = (
    "JAIL_LATINO_PERCENT",
    "JAIL_BLACK_PERCENT",
    "JAIL_PRETRIAL_PERCENT",
    "JAIL_OTHERCOUNTIES_RATE",
    "JAIL_STATES_RATE",
)
COUNTY_COVARIATES = (
    "HISPANIC_PERCENT",
    "NHBLACK_PERCENT",
    "POVERTY_PERCENT",
    "UNEMPLOYMENT_PERCENT",
    "WELF_EXP_RATE",
    "POLICE_EXP_RATE",
)
STATE_COVARIATES = ("PRISON_JAIL_PERCENT", "PRISON_TOTAL_RATE")
ALL_COVARIATES = JAIL_COVARIATES + COUNTY_COVARIATES + STATE_COVARIATES

RACE_ETHNICITY_COVARIATES = (
    "JAIL_LATINO_PERCENT",
    "JAIL_BLACK_PERCENT",
    "HISPANIC_PERCENT",
    "NHBLACK_PERCENT",
)

CORRELATION_KINDS = ("independence", "exchangeable", "ar1")

DEFAULT_REFERENTS = {"urban_code": "rural", "year": 2000}


@dataclass(frozen=True)
class ModelSpec:
    """One regression in a ladder.

    Parameters
    ----------
    name : str
        Unique label used in output file names and tables.
    urban_code : bool
        Include urban-code indicators (referent omitted).
    year : bool
        Include year indicators (referent omitted).
    covariates : tuple of str
        Continuous covariates, in design-column order.
    correlation : {"independence", "exchangeable", "ar1"}
        Working correlation structure.
    referents : mapping
        Omitted level for each categorical term.
    tol, max_iter : float, int
        Convergence policy on max |delta beta|.
    fixed_alpha : float, optional
        Hold the correlation parameter at this value instead of estimating it.
    """

    name: str = "model"
    urban_code: bool = True
    year: bool = False
    covariates: tuple[str, ...] = ()
    correlation: str = "exchangeable"
    referents: Mapping[str, object] = field(default_factory=lambda: dict(DEFAULT_REFERENTS))
    tol: float = 1e-8
    max_iter: int = 100
    fixed_alpha: float | None = None

    def __post_init__(self):
        object.__setattr__(self, "covariates", tuple(self.covariates))
        refs = dict(DEFAULT_REFERENTS)
        refs.update(self.referents or {})
        object.__setattr__(self, "referents", refs)
        if self.correlation not in CORRELATION_KINDS:
            raise ValueError(
                f"unknown correlation structure {self.correlation!r}; "
                f"expected one of {CORRELATION_KINDS}"
            )
        if refs["urban_code"] not in URBAN_LEVELS:
            raise ValueError(f"unknown urban_code referent {refs['urban_code']!r}")
        if len(set(self.covariates)) != len(self.covariates):
            raise ValueError(f"duplicate covariates in model {self.name!r}")
        if self.tol <= 0 or self.max_iter < 1:
            raise ValueError("tol must be positive and max_iter at least 1")

    @property
    def urban_indicator_levels(self) -> tuple[str, ...]:
        ref = self.referents["urban_code"]
        if ref == "rural":
            return URBAN_INDICATORS
        return tuple(lvl for lvl in URBAN_LEVELS if lvl != ref)

    def required_columns(self, mode: str = "rate") -> set[str]:
        """Columns that must be non-missing for a row to enter this model."""
        cols = {"jail_rate"}
        if self.urban_code:
            cols.add("urban_code")
        if mode == "count":
            cols.add("population")
        cols.update(self.covariates)
        return cols

    def with_options(self, **changes) -> "ModelSpec":
        kwargs = {
            "name": self.name,
            "urban_code": self.urban_code,
            "year": self.year,
            "covariates": self.covariates,
            "correlation": self.correlation,
            "referents": dict(self.referents),
            "tol": self.tol,
            "max_iter": self.max_iter,
            "fixed_alpha": self.fixed_alpha,
        }
        kwargs.update(changes)
        return ModelSpec(**kwargs)


def reference_ladder(correlation: str = "exchangeable") -> list[ModelSpec]:
    """The three nested models: urban code, plus year, plus all covariates."""
    return [
        ModelSpec("urban_code", urban_code=True, year=False, correlation=correlation),
        ModelSpec("urban_code_year", urban_code=True, year=True, correlation=correlation),
        ModelSpec(
            "full",
            urban_code=True,
            year=True,
            covariates=ALL_COVARIATES,
            correlation=correlation,
        ),
    ]


def residual_model(correlation: str = "exchangeable") -> ModelSpec:
    """Full model with every race/ethnicity covariate removed."""
    kept = tuple(c for c in ALL_COVARIATES if c not in RACE_ETHNICITY_COVARIATES)
    return ModelSpec(
        "residual", urban_code=True, year=True, covariates=kept, correlation=correlation
    )
