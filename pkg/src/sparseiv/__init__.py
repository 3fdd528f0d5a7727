"""Sparse-model instrumental-variable estimation.

Lasso and Post-Lasso first stages for optimal instruments, IV inference
with robust variances, a weak-identification robust sup-score region, and
the simulation harness used to compare these methods with standard
many-instrument estimators.
"""

from sparseiv.data import Dataset, partial_out, normalize_instruments
from sparseiv.exceptions import ConvergenceError, NumericalError, SparseIVError, ValidationError
from sparseiv.first_stage import FirstStageFit, fit_first_stage
from sparseiv.iv import IvEstimate, fit_iv, iv_estimate, spec_test, split_sample_iv
from sparseiv.lasso import PenaltyPlan, penalty_level, post_lasso, solve_weighted_lasso

__version__ = "0.1.0"

__all__ = [
    "ConvergenceError",
    "Dataset",
    "FirstStageFit",
    "IvEstimate",
    "NumericalError",
    "PenaltyPlan",
    "SparseIVError",
    "ValidationError",
    "fit_first_stage",
    "fit_iv",
    "iv_estimate",
    "normalize_instruments",
    "partial_out",
    "penalty_level",
    "post_lasso",
    "solve_weighted_lasso",
    "spec_test",
    "split_sample_iv",
]
