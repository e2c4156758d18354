"""Benchmark rare-event problems.

Four problems ship with the package:

* ``convex``       -- algebraic limit state with a convex failure domain in d=2,
                      in a standard regime and a much rarer shifted-prior regime.
* ``saddle``       -- linear saddle dynamics; the failure set is the ellipse of
                      initial conditions whose trajectories stay near the origin,
                      so the reference probability is computable by quadrature.
* ``vortex``       -- stochastic point-vortex triple with zero total circulation;
                      failure means staying close to the (unstable) equilateral
                      relative equilibrium over a time window.  The limit state
                      is a random map.
* ``gaussian_tail``-- d=1 analytic sanity problem, G(x) = c - x under N(0, 1).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional

import numpy as np
from scipy import integrate

from .core import GaussianPrior, RareEventProblem

__all__ = [
    "convex_g",
    "convex_g_gradient",
    "make_convex_problem",
    "SaddleParams",
    "saddle_observable",
    "saddle_g",
    "saddle_g_gradient",
    "saddle_reference_probability",
    "make_saddle_problem",
    "VortexParams",
    "VortexTrajectory",
    "BLOCKING_CIRCULATIONS",
    "vortex_drift",
    "vortex_hamiltonian",
    "pair_circulation_sum",
    "equilateral_side",
    "equilateral_configuration",
    "vortex_observable",
    "simulate_vortex_sde",
    "vortex_limit_state",
    "make_vortex_problem",
    "write_trajectory_csv",
    "make_gaussian_tail_problem",
]


# ---------------------------------------------------------------------------
# convex limit state
# ---------------------------------------------------------------------------

_SQRT2 = math.sqrt(2.0)


def convex_g(x) -> np.ndarray:
    """G(x1, x2) = 0.1 (x1 - x2)^2 - (x1 + x2)/sqrt(2) + 2.5, vectorized."""
    x = np.asarray(x, dtype=float)
    x1, x2 = x[..., 0], x[..., 1]
    return 0.1 * (x1 - x2) ** 2 - (x1 + x2) / _SQRT2 + 2.5


def convex_g_gradient(x) -> np.ndarray:
    x = np.asarray(x, dtype=float)
    diff = 0.2 * (x[..., 0] - x[..., 1])
    out = np.empty_like(x)
    out[..., 0] = diff - 1.0 / _SQRT2
    out[..., 1] = -diff - 1.0 / _SQRT2
    return out


def make_convex_problem(regime: str = "standard") -> RareEventProblem:
    """Bundle the convex limit state with the regime's Gaussian prior.

    ``standard`` uses N(0, I); ``rare`` shifts the prior to N((-2,-2), 0.8 I),
    which pushes the failure probability far below crude-Monte-Carlo reach.
    """
    if regime == "standard":
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        name = "convex"
    elif regime == "rare":
        prior = GaussianPrior(np.array([-2.0, -2.0]), 0.8 * np.eye(2))
        name = "convex_rare"
    else:
        raise ValueError(f"unknown regime {regime!r}; expected 'standard' or 'rare'")
    return RareEventProblem(
        dimension=2,
        limit_state=convex_g,
        limit_state_gradient=convex_g_gradient,
        prior=prior,
        name=name,
    )


# ---------------------------------------------------------------------------
# hyperbolic saddle
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SaddleParams:
    """Rates of the saddle flow, averaging horizon, and failure threshold."""

    decay_rate: float = 1.0
    growth_rate: float = 1.0
    horizon: float = 1.0
    threshold: float = 0.5

    def __post_init__(self):
        for name in ("decay_rate", "growth_rate", "horizon", "threshold"):
            if not getattr(self, name) > 0:
                raise ValueError(f"{name} must be positive, got {getattr(self, name)}")

    def quadratic_coefficients(self) -> tuple[float, float]:
        """Coefficients (a, b) with A(x0, y0) = a x0^2 + b y0^2."""
        lam, mu, T = self.decay_rate, self.growth_rate, self.horizon
        a = (1.0 - math.exp(-2.0 * lam * T)) / (2.0 * lam * T)
        b = (math.exp(2.0 * mu * T) - 1.0) / (2.0 * mu * T)
        return a, b


def saddle_observable(x, params: SaddleParams) -> np.ndarray:
    """Time-averaged squared distance from the saddle along the explicit flow."""
    a, b = params.quadratic_coefficients()
    x = np.asarray(x, dtype=float)
    return a * x[..., 0] ** 2 + b * x[..., 1] ** 2


def saddle_g(x, params: SaddleParams) -> np.ndarray:
    """Limit state G = A - r; the failure set is a solid ellipse."""
    return saddle_observable(x, params) - params.threshold


def saddle_g_gradient(x, params: SaddleParams) -> np.ndarray:
    a, b = params.quadratic_coefficients()
    x = np.asarray(x, dtype=float)
    out = np.empty_like(x)
    out[..., 0] = 2.0 * a * x[..., 0]
    out[..., 1] = 2.0 * b * x[..., 1]
    return out


def saddle_reference_probability(params: SaddleParams, prior: GaussianPrior) -> float:
    """Prior mass of the failure ellipse by adaptive 2D quadrature (abs tol 1e-12)."""
    if prior.dimension != 2:
        raise ValueError("saddle reference requires a two-dimensional prior")
    a, b = params.quadratic_coefficients()
    r = params.threshold
    ax, by = math.sqrt(r / a), math.sqrt(r / b)

    def density(y, x):
        return float(np.exp(prior.log_density(np.array([x, y]))))

    def y_lo(x):
        return -by * math.sqrt(max(0.0, 1.0 - (x / ax) ** 2))

    def y_hi(x):
        return by * math.sqrt(max(0.0, 1.0 - (x / ax) ** 2))

    value, abserr = integrate.dblquad(density, -ax, ax, y_lo, y_hi, epsabs=1e-12)
    if abserr > 1e-9:
        raise RuntimeError(
            f"ellipse quadrature did not converge: abs error estimate {abserr:.3e}"
        )
    return float(value)


def make_saddle_problem(
    params: SaddleParams | None = None, prior: GaussianPrior | None = None
) -> RareEventProblem:
    params = params or SaddleParams()
    prior = prior or GaussianPrior(np.array([-2.0, -2.0]), 0.5 * np.eye(2))
    return RareEventProblem(
        dimension=2,
        limit_state=lambda x: saddle_g(x, params),
        limit_state_gradient=lambda x: saddle_g_gradient(x, params),
        prior=prior,
        name="saddle",
    )


# ---------------------------------------------------------------------------
# stochastic point vortices
# ---------------------------------------------------------------------------

BLOCKING_CIRCULATIONS = (1.0, 1.0, -2.0)

_COLLISION_DISTANCE = 1e-8


@dataclass(frozen=True)
class VortexParams:
    """Circulations, energy level, failure threshold, and forward-SDE settings."""

    circulations: tuple = BLOCKING_CIRCULATIONS
    energy: float = 1.0
    threshold: float = 0.25
    sigma: float = 0.1
    forward_step: float = 0.02
    forward_horizon: float = 0.5

    def __post_init__(self):
        if len(self.circulations) != 3:
            raise ValueError("exactly three circulations are required")
        if not self.threshold > 0:
            raise ValueError(f"threshold must be positive, got {self.threshold}")
        if self.sigma < 0:
            raise ValueError(f"sigma must be nonnegative, got {self.sigma}")
        if not self.forward_step > 0 or not self.forward_horizon > 0:
            raise ValueError("forward_step and forward_horizon must be positive")

    def num_nodes(self) -> int:
        return math.ceil(self.forward_horizon / self.forward_step - 1e-9)


def _as_points(state) -> np.ndarray:
    """Reshape flat vortex states (..., 2N) into point blocks (..., N, 2)."""
    s = np.asarray(state, dtype=float)
    if s.shape[-1] % 2:
        raise ValueError(f"vortex state length must be even, got {s.shape[-1]}")
    return s.reshape(s.shape[:-1] + (s.shape[-1] // 2, 2))


def _pairwise_sq_distances(pts: np.ndarray) -> np.ndarray:
    diff = pts[..., :, None, :] - pts[..., None, :, :]
    return np.einsum("...ijk,...ijk->...ij", diff, diff)


def pair_circulation_sum(circulations) -> float:
    """gamma = G1 G2 + G2 G3 + G3 G1; negative gamma makes equilateria unstable."""
    c1, c2, c3 = (float(c) for c in circulations)
    return c1 * c2 + c2 * c3 + c3 * c1


def vortex_drift(state, circulations) -> np.ndarray:
    """Velocity field of the N-vortex system, vectorized over leading axes.

    dx_j/dt = -(1/2pi) sum_{i != j} G_i (y_j - y_i) / l_ij^2 and the mirrored
    expression for dy_j/dt.  Coincident vortices make the field singular and
    raise an error naming the offending pair.
    """
    pts = _as_points(state)
    circ = np.asarray(circulations, dtype=float)
    n = pts.shape[-2]
    if circ.shape != (n,):
        raise ValueError(f"expected {n} circulations, got shape {circ.shape}")
    diff = pts[..., :, None, :] - pts[..., None, :, :]
    d2 = np.einsum("...ijk,...ijk->...ij", diff, diff)
    eye = np.eye(n, dtype=bool)
    off = d2[..., ~eye]
    if np.any(off == 0.0):
        flat = d2.reshape(-1, n, n)
        idx = np.argwhere((flat == 0.0) & ~eye)[0]
        raise ValueError(f"coincident vortices {idx[1]} and {idx[2]}")
    inv2 = np.where(eye, 0.0, 1.0 / np.where(eye, 1.0, d2))
    wx = -np.sum(circ * diff[..., 1] * inv2, axis=-1) / (2.0 * np.pi)
    wy = np.sum(circ * diff[..., 0] * inv2, axis=-1) / (2.0 * np.pi)
    out = np.stack([wx, wy], axis=-1)
    return out.reshape(np.shape(np.asarray(state, dtype=float)))


def vortex_hamiltonian(state, circulations) -> np.ndarray:
    """H = -(1/4pi) sum over unordered pairs i<j of G_i G_j ln l_ij."""
    pts = _as_points(state)
    circ = np.asarray(circulations, dtype=float)
    n = pts.shape[-2]
    iu, ju = np.triu_indices(n, k=1)
    diff = pts[..., iu, :] - pts[..., ju, :]
    d2 = np.einsum("...ik,...ik->...i", diff, diff)
    if np.any(d2 == 0.0):
        raise ValueError("coincident vortices: Hamiltonian undefined")
    return -np.sum(circ[iu] * circ[ju] * 0.5 * np.log(d2), axis=-1) / (4.0 * np.pi)


def equilateral_side(energy: float, circulations=BLOCKING_CIRCULATIONS) -> float:
    """Side length l(H) = exp(-4 pi H / gamma) of the equilateral configuration."""
    gamma = pair_circulation_sum(circulations)
    if gamma == 0.0:
        raise ValueError("pair circulation sum gamma is zero; no energy-side relation")
    return math.exp(-4.0 * math.pi * energy / gamma)


def equilateral_configuration(energy: float, circulations=BLOCKING_CIRCULATIONS) -> np.ndarray:
    """Equilateral triangle at energy level H: centroid at the origin, first
    vertex on the positive x-axis, counterclockwise orientation.  Flat (6,)."""
    side = equilateral_side(energy, circulations)
    radius = side / math.sqrt(3.0)
    angles = np.array([0.0, 2.0 * np.pi / 3.0, 4.0 * np.pi / 3.0])
    pts = radius * np.stack([np.cos(angles), np.sin(angles)], axis=-1)
    return pts.reshape(6)


def vortex_observable(state, energy: float, circulations=BLOCKING_CIRCULATIONS) -> np.ndarray:
    """Distance of a 3-vortex configuration from the equilateral shape at l(H).

    A = |cos t1 - 1/2| + |cos t2 - 1/2| + |mean side - l(H)| with t1 the angle
    at the first vortex and t2 the angle at the second.  Zero exactly on
    equilateral triangles of side l(H).
    """
    pts = _as_points(state)
    if pts.shape[-2] != 3:
        raise ValueError("observable is defined for exactly three vortices")
    e12 = pts[..., 1, :] - pts[..., 0, :]
    e13 = pts[..., 2, :] - pts[..., 0, :]
    e23 = pts[..., 2, :] - pts[..., 1, :]
    l12 = np.sqrt(np.einsum("...k,...k->...", e12, e12))
    l13 = np.sqrt(np.einsum("...k,...k->...", e13, e13))
    l23 = np.sqrt(np.einsum("...k,...k->...", e23, e23))
    if np.any(l12 == 0.0) or np.any(l13 == 0.0) or np.any(l23 == 0.0):
        raise ValueError("degenerate configuration: zero-length edge")
    cos1 = np.clip(np.einsum("...k,...k->...", e12, e13) / (l12 * l13), -1.0, 1.0)
    cos2 = np.clip(np.einsum("...k,...k->...", -e12, e23) / (l12 * l23), -1.0, 1.0)
    side = equilateral_side(energy, circulations)
    return (
        np.abs(cos1 - 0.5)
        + np.abs(cos2 - 0.5)
        + np.abs((l12 + l23 + l13) / 3.0 - side)
    )


@dataclass
class VortexTrajectory:
    """Euler-Maruyama path of the vortex SDE; truncated at a collision if any."""

    times: np.ndarray
    states: np.ndarray
    collided: bool = False
    collision_step: Optional[int] = None


def _min_offdiag_distance_sq(pts: np.ndarray) -> np.ndarray:
    d2 = _pairwise_sq_distances(pts)
    n = pts.shape[-2]
    d2 = d2 + np.where(np.eye(n, dtype=bool), np.inf, 0.0)
    return d2.min(axis=(-2, -1))


def simulate_vortex_sde(
    x0, params: VortexParams, stream: np.random.Generator
) -> VortexTrajectory:
    """Integrate dX = drift(X) dt + sigma dW by Euler-Maruyama, keeping all states.

    A collision (intervortical distance below 1e-8) truncates the path and
    flags the trajectory; callers decide how to score the remaining window.
    """
    x = np.asarray(x0, dtype=float).reshape(-1)
    if _min_offdiag_distance_sq(_as_points(x)) < _COLLISION_DISTANCE**2:
        raise ValueError("initial configuration already has coincident vortices")
    n = params.num_nodes()
    dt = params.forward_step
    states = np.empty((n + 1, x.shape[0]))
    states[0] = x
    sqdt = math.sqrt(dt)
    for k in range(n):
        drift = vortex_drift(states[k], params.circulations)
        noise = params.sigma * sqdt * stream.standard_normal(x.shape[0]) if params.sigma else 0.0
        states[k + 1] = states[k] + dt * drift + noise
        if _min_offdiag_distance_sq(_as_points(states[k + 1])) < _COLLISION_DISTANCE**2:
            times = dt * np.arange(k + 2)
            return VortexTrajectory(times, states[: k + 2], collided=True, collision_step=k + 1)
    return VortexTrajectory(dt * np.arange(n + 1), states)


def vortex_limit_state(x0s, params: VortexParams, rng: np.random.Generator) -> np.ndarray:
    """Random limit state G_r(X0) = mean_t A(X_t) - r over the forward window.

    The time average is a left Riemann sum over the Euler-Maruyama nodes
    0..N-1.  Paths that suffer a vortex collision keep reporting the
    observable of their last valid state for the remaining nodes.  Vectorized
    over a batch of initial conditions; noise is pre-assigned per (node,
    path), so results do not depend on batch composition.
    """
    x = np.asarray(x0s, dtype=float)
    single = x.ndim == 1
    states = np.atleast_2d(x).copy()
    m = states.shape[0]
    n = params.num_nodes()
    dt = params.forward_step
    sqdt = math.sqrt(dt)
    alive = _min_offdiag_distance_sq(_as_points(states)) >= _COLLISION_DISTANCE**2
    if single and not alive[0]:
        raise ValueError("initial configuration already has coincident vortices")
    a_last = np.zeros(m)
    a_sum = np.zeros(m)
    for k in range(n):
        if np.any(alive):
            a_last[alive] = vortex_observable(
                states[alive], params.energy, params.circulations
            )
        a_sum += a_last
        if np.any(alive):
            drift = vortex_drift(states[alive], params.circulations)
            if params.sigma:
                noise = rng.standard_normal(states.shape)
                states[alive] += dt * drift + params.sigma * sqdt * noise[alive]
            else:
                states[alive] += dt * drift
            newly_dead = alive & (
                _min_offdiag_distance_sq(_as_points(states)) < _COLLISION_DISTANCE**2
            )
            alive &= ~newly_dead
    g = a_sum / n - params.threshold
    return float(g[0]) if single else g


def make_vortex_problem(
    params: VortexParams | None = None, prior: GaussianPrior | None = None
) -> RareEventProblem:
    """Vortex benchmark: stochastic forward map, no gradient, Gaussian prior
    centered at the equilateral configuration of the requested energy."""
    params = params or VortexParams()
    if prior is None:
        center = equilateral_configuration(params.energy, params.circulations)
        prior = GaussianPrior(center, 0.25 * np.eye(6))
    return RareEventProblem(
        dimension=6,
        limit_state=lambda x, rng: vortex_limit_state(x, params, rng),
        prior=prior,
        stochastic_forward=True,
        name="vortex",
    )


def write_trajectory_csv(trajectory: VortexTrajectory, path) -> None:
    """Write a vortex path as CSV rows ``time,x1,y1,x2,y2,x3,y3``."""
    with open(path, "w") as fh:
        fh.write("time,x1,y1,x2,y2,x3,y3\n")
        for t, row in zip(trajectory.times, trajectory.states):
            coords = ",".join(repr(float(v)) for v in row)
            fh.write(f"{repr(float(t))},{coords}\n")


# ---------------------------------------------------------------------------
# analytic Gaussian tail problem
# ---------------------------------------------------------------------------


def make_gaussian_tail_problem(threshold: float = 3.0) -> RareEventProblem:
    """d=1 problem G(x) = c - x under N(0,1); P_f = Phi(-c) analytically."""

    def g(x):
        x = np.asarray(x, dtype=float)
        return threshold - x[..., 0]

    def grad(x):
        x = np.asarray(x, dtype=float)
        return -np.ones_like(x)

    return RareEventProblem(
        dimension=1,
        limit_state=g,
        limit_state_gradient=grad,
        prior=GaussianPrior(np.zeros(1), np.eye(1)),
        name="gaussian_tail",
    )
