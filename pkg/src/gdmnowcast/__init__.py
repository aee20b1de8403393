"""Bayesian nowcasting of delayed count data.

A Negative-Binomial model for eventual totals joined with a
Generalized-Dirichlet-Multinomial model for how each total is spread over
reporting delays, fitted by adaptive Metropolis-within-Gibbs.
"""

from .data import (
    AccessLoggingTriangle,
    CensoredTriangle,
    EventRecord,
    ReportingTriangle,
    build_triangle,
    censor_at,
    read_records,
    write_long_csv,
)
from .experiment import (
    MetricsTable,
    RollingConfig,
    SimulationScenario,
    compute_metrics,
    run_rolling,
    simulate_dataset,
)
from .kernels import BACKEND
from .mcmc import McmcConfig, PosteriorSamples, convergence_report, run_chains
from .model import ModelSpec, PriorSpec, TermSpec, UnderreportingSpec
from .prediction import NowcastResult, aggregate, posterior_predictive_check, predict_totals

__version__ = "0.1.0"

__all__ = [
    "AccessLoggingTriangle",
    "BACKEND",
    "CensoredTriangle",
    "EventRecord",
    "McmcConfig",
    "MetricsTable",
    "ModelSpec",
    "NowcastResult",
    "PosteriorSamples",
    "PriorSpec",
    "ReportingTriangle",
    "RollingConfig",
    "SimulationScenario",
    "TermSpec",
    "UnderreportingSpec",
    "aggregate",
    "build_triangle",
    "censor_at",
    "compute_metrics",
    "convergence_report",
    "posterior_predictive_check",
    "predict_totals",
    "read_records",
    "run_chains",
    "run_rolling",
    "simulate_dataset",
    "write_long_csv",
]
