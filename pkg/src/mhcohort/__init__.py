"""Mantel-Haenszel rate-ratio estimation for full cohorts and sampled risk sets."""

from .cohort import CLASSICAL, Cohort, LevelSet, RiskSet, build_cohort, level_index, risk_set
from .designs import DesignSpec, SampledFailure, enumerate_design, sample_cohort
from .estimator import EstimateResult, accumulate, estimate, estimate_stratified, solve_phi

__all__ = [
    "CLASSICAL",
    "Cohort",
    "DesignSpec",
    "EstimateResult",
    "LevelSet",
    "RiskSet",
    "SampledFailure",
    "accumulate",
    "build_cohort",
    "enumerate_design",
    "estimate",
    "estimate_stratified",
    "level_index",
    "risk_set",
    "sample_cohort",
    "solve_phi",
]

__version__ = "0.1.0"
