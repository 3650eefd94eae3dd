"""Marginal cumulative-logit models for incomplete longitudinal ordinal data.

Estimators: available/complete-data GEE, inverse-probability weighted GEE,
multiple-imputation GEE and doubly robust GEE, each with correlation or
local odds ratio working association structures.
"""

from .association import AssociationEstimate, AssociationSpec
from .estimators import (
    FitResult,
    dr_augmentation,
    fit,
    mi_pool,
    sandwich_dr,
    solve_drgee,
    solve_gee,
    solve_migee,
    solve_wgee,
)
from .exceptions import (
    AssociationFitError,
    ImputationError,
    InsufficientDataError,
    InvalidParameterError,
    IPFPError,
    MalformedDataError,
    NonConvergenceError,
    OrdGEEError,
    PoolingError,
    SeparationError,
)
from .missingness import ModelConfig, fit_missingness_models
from .panel import OrdinalPanel, RegressionParams, SubjectRecord, read_panel_csv, write_panel_csv
from .simulation import Scenario, run_study

__version__ = "0.1.0"

__all__ = [
    "AssociationEstimate", "AssociationSpec", "FitResult", "ModelConfig", "OrdinalPanel",
    "RegressionParams", "Scenario", "SubjectRecord", "dr_augmentation", "fit",
    "fit_missingness_models", "mi_pool", "read_panel_csv", "run_study", "sandwich_dr",
    "solve_drgee", "solve_gee", "solve_migee", "solve_wgee", "write_panel_csv",
    "AssociationFitError", "ImputationError", "InsufficientDataError", "InvalidParameterError",
    "IPFPError", "MalformedDataError", "NonConvergenceError", "OrdGEEError", "PoolingError",
    "SeparationError",
]
