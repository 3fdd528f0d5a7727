"""Simulation designs, comparison estimators and the replication harness."""

from sparseiv.montecarlo.baselines import (
    augment_principal_components,
    estimator_2sls,
    estimator_kclass,
    loocv_ridge,
)
from sparseiv.montecarlo.dgp import DgpSpec, Draw, gen_dgp
from sparseiv.montecarlo.estimators import DEFAULT_ESTIMATORS, ESTIMATORS, SimConfig
from sparseiv.montecarlo.runner import (
    MetricsTable,
    PowerCurve,
    run_replications,
    simulate,
    size_adjusted,
    size_adjusted_power,
)

__all__ = [
    "DEFAULT_ESTIMATORS",
    "ESTIMATORS",
    "DgpSpec",
    "Draw",
    "MetricsTable",
    "PowerCurve",
    "SimConfig",
    "augment_principal_components",
    "estimator_2sls",
    "estimator_kclass",
    "gen_dgp",
    "loocv_ridge",
    "run_replications",
    "simulate",
    "size_adjusted",
    "size_adjusted_power",
]
