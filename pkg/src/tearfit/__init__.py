"""Fit ODE models of tear-film thinning to fluorescence-intensity time series."""

__version__ = "0.1.0"

from tearfit.constants import (
    InvalidScaleError,
    NondimGroups,
    PhysicalConstants,
    TrialScales,
    derive_groups,
)
from tearfit.model import (
    DimParams,
    ModelParams,
    SolverFailure,
    StrainParams,
    Trajectory,
    closed_form,
    osmolarity_equilibrium,
    rhs,
    solve,
    strain_integral,
    strain_rate,
    to_dim,
    to_nondim,
)

__all__ = [
    "DimParams",
    "InvalidScaleError",
    "ModelParams",
    "NondimGroups",
    "PhysicalConstants",
    "SolverFailure",
    "StrainParams",
    "Trajectory",
    "TrialScales",
    "closed_form",
    "derive_groups",
    "osmolarity_equilibrium",
    "rhs",
    "solve",
    "strain_integral",
    "strain_rate",
    "to_dim",
    "to_nondim",
]
