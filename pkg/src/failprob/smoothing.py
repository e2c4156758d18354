"""Smooth surrogate of the hinge-shaped limit state and the sampling potential.

The raw map g -> max(0, g) is not differentiable at 0.  The surrogate below
replaces it on the strip (0, delta) by g * ramp(g), where ramp is a C-infinity
switch built from bump functions.  Outside the strip the surrogate coincides
with the raw map, the zero set {g <= 0} is preserved for every delta, and
sup |surrogate - max(0, g)| <= delta.

All functions are vectorized over numpy arrays.
"""

from __future__ import annotations

import numpy as np

from .core import RareEventProblem, SmoothingConfig

__all__ = [
    "psi",
    "ramp",
    "smooth_g",
    "smooth_g_derivative",
    "potential",
    "grad_potential",
]

# exp overflows just above 709; saturate the sigmoid argument safely below that
_EXP_CLIP = 700.0


def psi(x, delta: float):
    """Bump factor exp(1/delta^2) * exp(-1/x^2) for x > 0, else 0.

    Computed as exp(1/delta^2 - 1/x^2) so the value at x == delta is exactly 1.
    Overflows to inf when x >> delta for tiny delta; the ramp never evaluates
    it there (it uses the sigmoid form instead).
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.zeros_like(x)
    pos = x > 0
    if np.any(pos):
        out[pos] = np.exp(1.0 / delta**2 - 1.0 / x[pos] ** 2)
    return float(out[0]) if scalar else out


def ramp(x, delta: float):
    """Smooth switch phi(x) = psi(x) / (psi(x) + psi(delta - x)).

    Equals 0 for x <= 0, 1 for x >= delta, and rises monotonically in between.
    Evaluated in the overflow-safe sigmoid form 1 / (1 + exp(1/x^2 - 1/(delta-x)^2)).
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    x = np.asarray(x, dtype=float)
    scalar = x.ndim == 0
    x = np.atleast_1d(x)
    out = np.zeros_like(x)
    out[x >= delta] = 1.0
    inside = (x > 0) & (x < delta)
    if np.any(inside):
        xi = x[inside]
        with np.errstate(divide="ignore", over="ignore"):
            t = 1.0 / xi**2 - 1.0 / (delta - xi) ** 2
        out[inside] = 1.0 / (1.0 + np.exp(np.clip(t, -_EXP_CLIP, _EXP_CLIP)))
    return float(out[0]) if scalar else out


def _ramp_derivative(x: np.ndarray, delta: float) -> np.ndarray:
    """phi'(x) = phi (1 - phi) (2/x^3 + 2/(delta-x)^3) on (0, delta), 0 outside.

    Beyond |1/x^2 - 1/(delta-x)^2| = 700 the true value is far below the
    subnormal range (phi (1 - phi) < e^-700 beats any polynomial factor), so
    the derivative is returned as exact zero there; this also avoids inf
    artifacts from the polynomial factor overflowing first.
    """
    out = np.zeros_like(x)
    with np.errstate(divide="ignore", over="ignore"):
        t = np.where((x > 0) & (x < delta), 1.0 / x**2 - 1.0 / (delta - x) ** 2, np.inf)
    inside = np.abs(t) <= _EXP_CLIP
    if np.any(inside):
        xi = x[inside]
        phi = 1.0 / (1.0 + np.exp(t[inside]))
        out[inside] = phi * (1.0 - phi) * (2.0 / xi**3 + 2.0 / (delta - xi) ** 3)
    return out


def smooth_g(g, delta: float):
    """Smoothed limit-state value: 0 for g <= 0, g*ramp(g) on (0, delta), g above."""
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    g = np.asarray(g, dtype=float)
    scalar = g.ndim == 0
    g = np.atleast_1d(g)
    out = np.where(g >= delta, g, 0.0)
    inside = (g > 0) & (g < delta)
    if np.any(inside):
        out[inside] = g[inside] * ramp(g[inside], delta)
    return float(out[0]) if scalar else out


def smooth_g_derivative(g, delta: float):
    """d/dg of smooth_g: 0 below the strip, ramp + g*ramp' inside, 1 above.

    At the strip endpoints the one-sided limit values 0 and 1 apply (the
    surrogate is C-infinity with flat derivatives there).
    """
    if not delta > 0:
        raise ValueError(f"delta must be positive, got {delta}")
    g = np.asarray(g, dtype=float)
    scalar = g.ndim == 0
    g = np.atleast_1d(g)
    out = np.where(g >= delta, 1.0, 0.0)
    inside = (g > 0) & (g < delta)
    if np.any(inside):
        gi = g[inside]
        out[inside] = ramp(gi, delta) + gi * _ramp_derivative(gi, delta)
    return float(out[0]) if scalar else out


def potential(x, problem: RareEventProblem, cfg: SmoothingConfig, rng=None):
    """Sampling potential Phi(x) = smooth_g(G(x))^2 / (2R) - ln rho0(x), vectorized."""
    x = np.asarray(x, dtype=float)
    g = problem.evaluate_limit_state(x, rng)
    gs = smooth_g(g, cfg.delta)
    return gs**2 / (2.0 * cfg.noise_variance) - problem.prior.log_density(x)


def grad_potential(x, problem: RareEventProblem, cfg: SmoothingConfig):
    """Gradient of the potential, requires an analytic limit-state gradient.

    grad Phi = P0^{-1}(x - m0) + (smooth_g * smooth_g' / R) * grad G.
    """
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    xs = np.atleast_2d(x)
    g = np.atleast_1d(np.asarray(problem.evaluate_limit_state(xs), dtype=float))
    grad_g = np.asarray(problem.evaluate_gradient(xs), dtype=float).reshape(xs.shape)
    gs = np.atleast_1d(smooth_g(g, cfg.delta))
    gd = np.atleast_1d(smooth_g_derivative(g, cfg.delta))
    prior_term = problem.prior.precision_apply(xs - problem.prior.mean)
    out = prior_term + ((gs * gd) / cfg.noise_variance)[:, None] * grad_g
    return out[0] if single else out
