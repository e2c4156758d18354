"""Failure-probability estimators and diagnostics.

Two estimation routes sit on top of the sampler output:

* the product estimator, which multiplies the empirical failure fraction under
  the tempered posterior by an inverse-moment estimate of its normalization
  constant.  Exact in expectation but numerically fragile (the exponent
  grows like smoothed-G^2 / 2R), so it is shipped as a diagnostic; and
* self-normalized importance sampling from a fitted mixture proposal, which is
  the headline estimator.

A crude Monte Carlo baseline and a quadrature validator for the total
variation convergence of the smoothed posterior complete the module.  All
weight arithmetic happens in log space.
"""

from __future__ import annotations

import json
import os
import warnings
from dataclasses import dataclass, field, asdict

import numpy as np
from scipy.special import logsumexp

from .core import RareEventProblem, SmoothingConfig
from .gmm import GaussianMixture
from .smoothing import smooth_g

__all__ = [
    "EstimateReport",
    "product_estimator",
    "self_normalized_is",
    "mixture_is_estimator",
    "crude_monte_carlo",
    "GridSpec",
    "posterior_tv_distance",
    "write_report",
    "SWEEP_CSV_HEADER",
    "append_sweep_row",
]

_EXP_CLIP = 700.0
_CRUDE_MC_CHUNK = 1_000_000


@dataclass
class EstimateReport:
    """Failure-probability estimate with diagnostics and a full config echo."""

    p_hat: float
    method: str
    sample_count: int
    failure_count: int
    seed: int | None = None
    ess: float | None = None
    weight_variance: float | None = None
    std_error: float | None = None
    p_hat_self_normalized: float | None = None
    unstable: bool = False
    out_of_range: bool = False
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)


def write_report(report: EstimateReport, path) -> None:
    """Write the report as a sorted key-value text file (deterministic bytes)."""
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


SWEEP_CSV_HEADER = "method,J,delta,R,M,K,seed,p_hat,ess,failure_count,error"


def append_sweep_row(
    path,
    method: str,
    J,
    delta,
    R,
    M,
    K,
    seed,
    p_hat=None,
    ess=None,
    failure_count=None,
    error: str = "",
) -> None:
    """Append one sweep-experiment row, creating the header on first write."""
    fresh = not os.path.exists(path)
    fmt = lambda v: "" if v is None else (repr(float(v)) if isinstance(v, float) else str(v))
    with open(path, "a") as fh:
        if fresh:
            fh.write(SWEEP_CSV_HEADER + "\n")
        cells = [method, J, delta, R, M, K, seed, p_hat, ess, failure_count]
        fh.write(",".join(fmt(c) for c in cells) + "," + error.replace(",", ";") + "\n")


def product_estimator(
    samples,
    problem: RareEventProblem,
    cfg: SmoothingConfig,
    rng: np.random.Generator | None = None,
    seed: int | None = None,
    config: dict | None = None,
) -> EstimateReport:
    """Product estimate Z_hat * p_hat_star from samples of the tempered posterior.

    p_hat_star is the fraction of samples inside the failure set; Z_hat is the
    inverse of the empirical mean of exp(smooth_g^2 / 2R), evaluated by
    log-sum-exp.  Exponents are clamped at 700 and flag the report unstable.
    """
    xs = np.asarray(samples, dtype=float)
    if xs.ndim != 2 or xs.shape[0] < 1:
        raise ValueError(f"samples must form a nonempty (M, d) array, got {xs.shape}")
    m = xs.shape[0]
    g = np.asarray(problem.evaluate_limit_state(xs, rng), dtype=float)
    failures = int(np.count_nonzero(g <= 0.0))
    p_star = failures / m
    exponents = np.asarray(smooth_g(g, cfg.delta)) ** 2 / (2.0 * cfg.noise_variance)
    unstable = bool(np.max(exponents) > _EXP_CLIP)
    if unstable:
        warnings.warn(
            "product estimator exponent clamped at 700; the normalization "
            "estimate is unreliable",
            RuntimeWarning,
        )
        exponents = np.minimum(exponents, _EXP_CLIP)
    log_mean = logsumexp(exponents) - np.log(m)
    p_hat = float(np.exp(-log_mean) * p_star)
    out_of_range = p_hat > 1.0
    if out_of_range:
        warnings.warn("product estimate exceeds 1; reported as-is", RuntimeWarning)
    return EstimateReport(
        p_hat=p_hat,
        method="product",
        sample_count=m,
        failure_count=failures,
        seed=seed,
        unstable=unstable,
        out_of_range=out_of_range,
        config=config or {},
    )


def self_normalized_is(indicators, log_weights) -> tuple[float, float, float]:
    """Self-normalized estimate from indicators and unnormalized log-weights.

    Returns (p_hat, ess, weight_variance) with p_hat = sum(1 w) / sum(w),
    ess = (sum w)^2 / sum w^2, and the delta-method plug-in variance
    sum_m wn_m^2 (1_m - p_hat)^2 over normalized weights (approximate).
    Weights are exponentiated after subtracting the max log-weight.
    """
    ind = np.asarray(indicators, dtype=float)
    lw = np.asarray(log_weights, dtype=float)
    if ind.shape != lw.shape or ind.ndim != 1:
        raise ValueError("indicators and log_weights must be 1-D arrays of equal length")
    if np.any(np.isnan(lw)) or np.any(lw == np.inf):
        raise ValueError("log-weights must be finite or -inf")
    top = lw.max()
    if top == -np.inf:
        raise ValueError("proposal disjoint from prior support: all weights vanish")
    w = np.exp(lw - top)
    total = w.sum()
    p_hat = float((ind * w).sum() / total)
    wn = w / total
    ess = float(1.0 / (wn**2).sum())
    variance = float(np.sum(wn**2 * (ind - p_hat) ** 2))
    return p_hat, ess, variance


def mixture_is_estimator(
    mixture: GaussianMixture,
    problem: RareEventProblem,
    n_samples: int,
    stream: np.random.Generator,
    seed: int | None = None,
    config: dict | None = None,
) -> EstimateReport:
    """Importance sampling from a fitted mixture proposal.

    Draws ``n_samples`` from the mixture, scores the raw limit state (failure
    is G <= 0), and weighs by prior over proposal density in log space.  The
    estimate is the direct importance-sampling average

        p_hat = (1/M) sum_m 1{G(X_m) <= 0} rho0(X_m) / q(X_m),

    which only requires the proposal to cover the failure set and stays
    accurate when the proposal concentrates there.  The self-normalized ratio
    sum(1 w)/sum(w) is reported alongside as a diagnostic: its denominator
    needs the proposal to cover the whole prior, which a failure-concentrated
    proposal does not, making the ratio unusable as the estimate (see the
    package notes on estimator choice).  ESS and the delta-method variance
    diagnose the weight spread.  For stochastic forward maps, per-sample
    forward noise comes from the same stream, drawn after the proposal
    samples.
    """
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    xs = mixture.sample(n_samples, stream)
    g = np.asarray(
        problem.evaluate_limit_state(xs, stream if problem.stochastic_forward else None),
        dtype=float,
    )
    indicators = g <= 0.0
    log_w = problem.prior.log_density(xs) - mixture.log_density(xs)
    # max-log shift keeps the exponentials in range; with unit weights the
    # shift is exactly zero so the estimate reduces to the plain failure
    # fraction bit for bit
    top = float(log_w.max())
    scaled = np.exp(log_w - top)
    terms = indicators * scaled
    p_hat = float(np.mean(terms) * np.exp(top))
    std_error = float(np.std(terms) / np.sqrt(n_samples) * np.exp(top))
    p_sn, ess, variance = self_normalized_is(indicators, log_w)
    return EstimateReport(
        p_hat=p_hat,
        method="mixture_is",
        sample_count=n_samples,
        failure_count=int(indicators.sum()),
        seed=seed,
        ess=ess,
        weight_variance=variance,
        std_error=std_error,
        p_hat_self_normalized=p_sn,
        config=config or {},
    )


def crude_monte_carlo(
    problem: RareEventProblem,
    n_samples: int,
    stream: np.random.Generator,
    seed: int | None = None,
    config: dict | None = None,
) -> EstimateReport:
    """Plain Monte Carlo under the prior; the baseline rare events defeat."""
    if n_samples < 1:
        raise ValueError(f"n_samples must be >= 1, got {n_samples}")
    failures = 0
    done = 0
    while done < n_samples:
        block = min(_CRUDE_MC_CHUNK, n_samples - done)
        xs = problem.prior.sample(block, stream)
        g = problem.evaluate_limit_state(xs, stream if problem.stochastic_forward else None)
        failures += int(np.count_nonzero(np.asarray(g) <= 0.0))
        done += block
    p_hat = failures / n_samples
    std_error = float(np.sqrt(p_hat * (1.0 - p_hat) / n_samples))
    return EstimateReport(
        p_hat=p_hat,
        method="crude_mc",
        sample_count=n_samples,
        failure_count=failures,
        seed=seed,
        std_error=std_error,
        config=config or {},
    )


@dataclass(frozen=True)
class GridSpec:
    """Tensor quadrature grid: points per axis and half-width in prior std devs."""

    points_per_axis: int = 400
    span_std: float = 6.0

    def __post_init__(self):
        if self.points_per_axis < 2:
            raise ValueError("points_per_axis must be >= 2")
        if not self.span_std > 0:
            raise ValueError("span_std must be positive")


def posterior_tv_distance(
    problem: RareEventProblem,
    cfg: SmoothingConfig,
    grid: GridSpec | None = None,
) -> float:
    """Total variation distance between the smoothed posterior and the prior
    conditioned on the failure set, by midpoint quadrature (d = 2 only).

    Both densities are taken relative to the prior and normalized on the same
    grid, so TV = (1/2) * sum |f_smoothed - f_conditioned| dmu0.
    """
    if problem.dimension != 2:
        raise ValueError("the quadrature validator supports d = 2 only")
    grid = grid or GridSpec()
    n = grid.points_per_axis
    mean = problem.prior.mean
    stds = np.sqrt(np.diag(problem.prior.covariance))
    axes, widths = [], []
    for i in range(2):
        edges = np.linspace(
            mean[i] - grid.span_std * stds[i], mean[i] + grid.span_std * stds[i], n + 1
        )
        axes.append(0.5 * (edges[:-1] + edges[1:]))
        widths.append(edges[1] - edges[0])
    xg, yg = np.meshgrid(axes[0], axes[1], indexing="ij")
    pts = np.stack([xg.ravel(), yg.ravel()], axis=-1)
    cell = widths[0] * widths[1]
    w = np.exp(problem.prior.log_density(pts)) * cell
    mass = w.sum()
    if mass < 0.999:
        warnings.warn(
            f"quadrature grid captures prior mass {mass:.6f} < 0.999; widen the grid",
            RuntimeWarning,
        )
    g = np.asarray(problem.evaluate_limit_state(pts), dtype=float)
    smoothed = np.exp(
        -np.asarray(smooth_g(g, cfg.delta)) ** 2 / (2.0 * cfg.noise_variance)
    )
    indicator = (g <= 0.0).astype(float)
    z_smoothed = float(smoothed @ w)
    z_failure = float(indicator @ w)
    if z_failure == 0.0:
        raise ValueError("failure set carries no prior mass on the quadrature grid")
    diff = np.abs(smoothed / z_smoothed - indicator / z_failure)
    return float(0.5 * (diff @ w))
