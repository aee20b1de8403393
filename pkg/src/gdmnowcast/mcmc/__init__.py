"""Posterior sampling for the joint model."""

from .diagnostics import ConvergenceReport, convergence_report, ess, mcse, psrf, psrf_array
from .engine import (
    ChainBase,
    ChainResult,
    GDMChain,
    InitialisationError,
    McmcConfig,
    run_chains,
    run_sampler,
    sample_latent_total,
)
from .samples import PosteriorSamples

__all__ = [
    "ChainBase",
    "ChainResult",
    "ConvergenceReport",
    "GDMChain",
    "InitialisationError",
    "McmcConfig",
    "PosteriorSamples",
    "convergence_report",
    "ess",
    "mcse",
    "psrf",
    "psrf_array",
    "run_chains",
    "run_sampler",
    "sample_latent_total",
]
