"""Rare-event failure-probability estimation toolkit.

Pipeline: sample the smoothed, tempered posterior with an affine-invariant
interacting Langevin ensemble (ALDI), fit a Gaussian-mixture proposal to the
final particle cloud, then estimate the failure probability by
self-normalized importance sampling.  Ships with convex, saddle, point-vortex
and Gaussian-tail benchmark problems.
"""

from .core import (
    Ensemble,
    GaussianPrior,
    RareEventProblem,
    SmoothingConfig,
    cross_correlation,
    derive_stream,
    ensemble_covariance,
    ensemble_mean,
    ensemble_sqrt,
)
from .smoothing import grad_potential, potential, ramp, smooth_g, smooth_g_derivative
from .aldi import AldiConfig, AldiRun
from .gmm import EmConfig, GaussianMixture, fit_em
from .estimators import (
    EstimateReport,
    GridSpec,
    crude_monte_carlo,
    mixture_is_estimator,
    posterior_tv_distance,
    product_estimator,
    self_normalized_is,
)

__version__ = "0.1.0"

__all__ = [
    "Ensemble",
    "GaussianPrior",
    "RareEventProblem",
    "SmoothingConfig",
    "ensemble_mean",
    "ensemble_covariance",
    "ensemble_sqrt",
    "cross_correlation",
    "derive_stream",
    "smooth_g",
    "smooth_g_derivative",
    "ramp",
    "potential",
    "grad_potential",
    "AldiConfig",
    "AldiRun",
    "GaussianMixture",
    "EmConfig",
    "fit_em",
    "EstimateReport",
    "GridSpec",
    "mixture_is_estimator",
    "product_estimator",
    "self_normalized_is",
    "crude_monte_carlo",
    "posterior_tv_distance",
]
