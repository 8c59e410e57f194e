"""Estimation of HIV dynamic models with a time-varying infection rate.

MSSB gives fast smoothing-based estimates; SNLS refines them by fitting the
ODE solution directly with a spline-parameterized infection rate.
"""

__version__ = "0.1.0"

from .bspline import SplineSpec, basis_matrix, curve_eval, make_spec
from .data import ObservationSet, read_csv, write_csv
from .errors import (
    ConfigurationError,
    DataValidationError,
    DomainError,
    EstimationError,
    FitFailure,
    HivFitError,
    IntegrationBlowup,
    SingularDesignError,
)
from .model import ConstantParams, StateVector, integrate
from .mssb import MssbEstimate, run_mssb
from .optimize import DEConfig, OptimizerSettings, ScatterConfig, SearchBox, hybrid_minimize
from .snls import FitResult, SNLSSettings, bootstrap_ci, fit_combined, fit_snls, select_model

__all__ = [
    "ConfigurationError",
    "ConstantParams",
    "DEConfig",
    "DataValidationError",
    "DomainError",
    "EstimationError",
    "FitFailure",
    "FitResult",
    "HivFitError",
    "IntegrationBlowup",
    "MssbEstimate",
    "ObservationSet",
    "OptimizerSettings",
    "SNLSSettings",
    "ScatterConfig",
    "SearchBox",
    "SingularDesignError",
    "SplineSpec",
    "StateVector",
    "basis_matrix",
    "bootstrap_ci",
    "curve_eval",
    "fit_combined",
    "fit_snls",
    "hybrid_minimize",
    "integrate",
    "make_spec",
    "read_csv",
    "run_mssb",
    "select_model",
    "write_csv",
]
