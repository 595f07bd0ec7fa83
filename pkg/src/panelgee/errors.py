"""Exception hierarchy shared by every panelgee module."""


class PanelGEEError(Exception):
    """Base class for all errors raised by panelgee."""


class IngestError(PanelGEEError):
    """Unreadable panel file, missing mandatory columns, or bad cells."""


class SchemaError(PanelGEEError):
    """A requested column or covariate is not part of the panel schema."""


class ConfigError(PanelGEEError):
    """Run configuration is malformed or references missing files."""


class CorrelationError(PanelGEEError, ValueError):
    """Working-correlation parameter outside its validity interval."""


class FitError(PanelGEEError):
    """Base class for estimation failures."""


class RankDeficientError(FitError):
    """Design matrix is not of full column rank.

    Attributes
    ----------
    columns : list of str
        Names of the columns found to be collinear or constant.
    """

    def __init__(self, message, columns=()):
        super().__init__(message)
        self.columns = list(columns)


class NonSPDError(FitError):
    """The information matrix sum(D' V^-1 D) failed a Cholesky factorization."""

    def __init__(self, message, condition=float("nan")):
        super().__init__(message)
        self.condition = condition


class DegenerateFitError(FitError):
    """Dispersion collapsed to zero or nuisance moments are undefined."""


class ConvergenceError(FitError):
    """Iteration cap reached by a routine that cannot return partial output."""


class SpatialError(PanelGEEError):
    """Problems with adjacency, geometry, or spatial statistics inputs."""


class ZeroVarianceError(SpatialError):
    """Values passed to Moran's I have zero sample variance."""
