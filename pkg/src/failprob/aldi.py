"""Affine-invariant interacting Langevin ensemble sampler (ALDI).

An ensemble of J particles follows coupled Euler-Maruyama updates whose drift
is preconditioned by the empirical ensemble covariance and whose diffusion
uses the (d x J) ensemble square root with one J-dimensional standard-normal
increment per particle.  This generalized square root makes both the
factorization identity S S^T = C and the path-wise affine-equivariance of the
dynamics exact, at the cost of a (J, J) noise block per step.

Two drift variants are provided: the gradient form, which consumes an analytic
limit-state gradient through the potential, and a gradient-free form that
replaces the likelihood gradient by the ensemble cross-correlation between
particles and smoothed forward values (statistical linearization).
"""

from __future__ import annotations

import math
import warnings
from contextlib import nullcontext
from dataclasses import dataclass, field

import numpy as np

try:
    from threadpoolctl import threadpool_limits
except ImportError:  # pragma: no cover - threadpoolctl ships with the package
    threadpool_limits = None

from .core import (
    Ensemble,
    RareEventProblem,
    SmoothingConfig,
    derive_stream,
    ensemble_sqrt,
    _as_particles,
)
from .smoothing import grad_potential, smooth_g

__all__ = [
    "AldiConfig",
    "AldiRun",
    "drift_gradient",
    "drift_gradient_free",
    "diffusion",
    "step",
    "run",
    "write_snapshots_csv",
]

VARIANTS = ("gradient", "gradient_free")

# sustained near-singular covariance for this many steps triggers a collapse warning
_COLLAPSE_EIG = 1e-12
_COLLAPSE_STEPS = 100


@dataclass(frozen=True)
class AldiConfig:
    """Sampler settings: drift variant, Euler-Maruyama step, horizon, ensemble size."""

    variant: str = "gradient"
    step_size: float = 1e-3
    horizon: float = 10.0
    ensemble_size: int = 1000
    seed: int = 0
    record_every: int | None = None
    r_schedule: tuple = ()

    def __post_init__(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"variant must be one of {VARIANTS}, got {self.variant!r}")
        if self.step_size < 0:
            raise ValueError(f"step_size must be nonnegative, got {self.step_size}")
        if self.ensemble_size < 2:
            raise ValueError(f"ensemble_size must be >= 2, got {self.ensemble_size}")
        if self.record_every is not None and self.record_every < 1:
            raise ValueError(f"record_every must be >= 1, got {self.record_every}")
        times = [t for t, _ in self.r_schedule]
        if times != sorted(times):
            raise ValueError("r_schedule times must be ascending")

    def num_steps(self) -> int:
        if not self.step_size > 0:
            raise ValueError("step_size must be positive to run the sampler")
        if self.horizon < self.step_size:
            raise ValueError("horizon must be at least one step long")
        # guard against 5/0.00025 -> 20000.000000000004 ceiling to 20001
        return math.ceil(self.horizon / self.step_size - 1e-9)


@dataclass
class AldiRun:
    """Result of one sampler run: final ensemble, snapshots, counters, diagnostics."""

    final_ensemble: Ensemble
    snapshots: list
    forward_evaluations: int
    diagnostics: dict
    config: AldiConfig
    collapsed: bool = False


def drift_gradient(ensemble, problem: RareEventProblem, cfg: SmoothingConfig) -> np.ndarray:
    """Per-particle drift -C(X) grad Phi(x_j) + ((d+1)/J)(x_j - m(X))."""
    xs = _as_particles(ensemble)
    J, d = xs.shape
    dev = xs - xs.mean(axis=0)
    C = dev.T @ dev / J
    grads = grad_potential(xs, problem, cfg)
    return -(grads @ C) + ((d + 1) / J) * dev


def drift_gradient_free(
    ensemble,
    problem: RareEventProblem,
    cfg: SmoothingConfig,
    forward_rng: np.random.Generator | None = None,
    g_smooth: np.ndarray | None = None,
) -> np.ndarray:
    """Gradient-free drift using the particle/forward-value cross-correlation.

    Per particle: -[(1/R) D(X) g_j + C(X) P0^{-1}(x_j - m0)] + ((d+1)/J)(x_j - m),
    where g_j is the smoothed limit-state value of particle j and D(X) the
    cross-correlation vector of particles against those values.
    """
    xs = _as_particles(ensemble)
    J, d = xs.shape
    dev = xs - xs.mean(axis=0)
    C = dev.T @ dev / J
    if g_smooth is None:
        g_raw = problem.evaluate_limit_state(xs, forward_rng)
        g_smooth = np.asarray(smooth_g(g_raw, cfg.delta), dtype=float)
    D = dev.T @ (g_smooth - g_smooth.mean()) / J
    likelihood = np.outer(g_smooth, D) / cfg.noise_variance
    prior_pull = problem.prior.precision_apply(xs - problem.prior.mean) @ C
    return -(likelihood + prior_pull) + ((d + 1) / J) * dev


def diffusion(ensemble, noise: np.ndarray, dt: float) -> np.ndarray:
    """Diffusion increments sqrt(2 dt) S(X) xi_j, one J-vector of noise per particle.

    ``noise`` is a (J, J) standard-normal block whose column j drives particle j.
    The increments lie in the span of the ensemble deviations by construction.
    """
    xs = _as_particles(ensemble)
    J = xs.shape[0]
    noise = np.asarray(noise, dtype=float)
    if noise.shape != (J, J):
        raise ValueError(f"noise must have shape ({J}, {J}), got {noise.shape}")
    S = ensemble_sqrt(xs)
    return np.sqrt(2.0 * dt) * (S @ noise).T


def step(
    ensemble,
    problem: RareEventProblem,
    smoothing_cfg: SmoothingConfig,
    aldi_cfg: AldiConfig,
    stream: np.random.Generator,
    *,
    step_index: int = 0,
    forward_rng: np.random.Generator | None = None,
    _noise_out: np.ndarray | None = None,
) -> np.ndarray:
    """One Euler-Maruyama update of the whole ensemble."""
    xs = _as_particles(ensemble)
    J = xs.shape[0]
    # the (J, J) block is the dominant per-step cost; the run loop hands in a
    # reusable buffer to avoid churning 8 MB allocations at J = 1000
    noise = stream.standard_normal(out=_noise_out) if _noise_out is not None \
        else stream.standard_normal((J, J))
    if aldi_cfg.variant == "gradient":
        drift = drift_gradient(xs, problem, smoothing_cfg)
    else:
        drift = drift_gradient_free(xs, problem, smoothing_cfg, forward_rng=forward_rng)
    new = xs + aldi_cfg.step_size * drift + diffusion(xs, noise, aldi_cfg.step_size)
    if not np.all(np.isfinite(new)):
        bad = int(np.argwhere(~np.isfinite(new).all(axis=1))[0, 0])
        raise RuntimeError(
            f"non-finite particle state: particle {bad} at step {step_index} "
            f"(variant={aldi_cfg.variant}, dt={aldi_cfg.step_size})"
        )
    return new


def _effective_smoothing(t: float, base: SmoothingConfig, schedule) -> SmoothingConfig:
    R = base.noise_variance
    for t0, R0 in schedule:
        if t >= t0:
            R = R0
    if R == base.noise_variance:
        return base
    return SmoothingConfig(delta=base.delta, noise_variance=R)


def run(
    problem: RareEventProblem,
    smoothing_cfg: SmoothingConfig,
    aldi_cfg: AldiConfig,
    initial_ensemble=None,
) -> AldiRun:
    """Run the sampler for ceil(horizon/step) steps from prior-drawn particles.

    Parameters
    ----------
    problem : RareEventProblem
        Limit state, prior, and (for the gradient variant) gradient.
    smoothing_cfg : SmoothingConfig
        Smoothing width and observation-noise variance of the target.
    aldi_cfg : AldiConfig
        Sampler settings; ``seed`` keys every random stream of the run.
    initial_ensemble : array_like, optional
        (J, d) starting particles; defaults to independent prior draws.

    Returns
    -------
    AldiRun with the final ensemble, thinned snapshots, the forward-evaluation
    counter and per-step covariance eigenvalue diagnostics.
    """
    if aldi_cfg.variant == "gradient" and not problem.has_gradient:
        raise ValueError(
            f"problem {problem.name!r} has no gradient; use the gradient_free variant"
        )
    d = problem.dimension
    J = aldi_cfg.ensemble_size
    if J <= d + 1:
        warnings.warn(
            f"ensemble size J={J} is not above d+1={d + 1}; ergodicity is not guaranteed",
            RuntimeWarning,
        )
    n = aldi_cfg.num_steps()
    record_every = aldi_cfg.record_every or n

    if initial_ensemble is None:
        init_rng = derive_stream(aldi_cfg.seed, ["aldi", "init"])
        xs = problem.prior.sample(J, init_rng)
    else:
        xs = np.array(_as_particles(initial_ensemble), dtype=float)
        if xs.shape != (J, d):
            raise ValueError(f"initial ensemble must have shape ({J}, {d}), got {xs.shape}")

    noise_stream = derive_stream(aldi_cfg.seed, ["aldi", "noise"])
    noise_buffer = np.empty((J, J))
    dt = aldi_cfg.step_size
    snapshots = []
    min_eigs = np.empty(n)
    max_eigs = np.empty(n)
    forward_evaluations = 0
    collapse_run = 0
    collapsed = False

    # single-threaded BLAS inside the loop: the per-step matrices are small,
    # and idle spinning BLAS workers otherwise slow the noise generation down
    blas_scope = (
        threadpool_limits(limits=1, user_api="blas") if threadpool_limits else nullcontext()
    )
    with blas_scope:
        for k in range(1, n + 1):
            t_prev = (k - 1) * dt
            cfg_k = _effective_smoothing(t_prev, smoothing_cfg, aldi_cfg.r_schedule)
            forward_rng = (
                derive_stream(aldi_cfg.seed, ["forward", k])
                if problem.stochastic_forward
                else None
            )
            xs = step(
                xs, problem, cfg_k, aldi_cfg, noise_stream,
                step_index=k, forward_rng=forward_rng, _noise_out=noise_buffer,
            )
            forward_evaluations += J

            dev = xs - xs.mean(axis=0)
            eigs = np.linalg.eigvalsh(dev.T @ dev / J)
            min_eigs[k - 1] = eigs[0]
            max_eigs[k - 1] = eigs[-1]
            if eigs[0] < _COLLAPSE_EIG:
                collapse_run += 1
                if collapse_run == _COLLAPSE_STEPS and not collapsed:
                    collapsed = True
                    warnings.warn(
                        f"ensemble covariance nearly singular for {_COLLAPSE_STEPS} "
                        f"consecutive steps (min eigenvalue < {_COLLAPSE_EIG:g})",
                        RuntimeWarning,
                    )
            else:
                collapse_run = 0

            if k % record_every == 0:
                snapshots.append((k * dt, Ensemble(xs.copy())))

    if not snapshots or snapshots[-1][0] != n * dt:
        snapshots.append((n * dt, Ensemble(xs.copy())))

    return AldiRun(
        final_ensemble=Ensemble(xs),
        snapshots=snapshots,
        forward_evaluations=forward_evaluations,
        diagnostics={"min_eigenvalue": min_eigs, "max_eigenvalue": max_eigs},
        config=aldi_cfg,
        collapsed=collapsed,
    )


def write_snapshots_csv(aldi_run: AldiRun, path) -> None:
    """Write snapshots as CSV rows ``time,particle,x0,...,x{d-1}``.

    Floats are formatted with round-trip (shortest exact) decimal
    representations.
    """
    d = aldi_run.final_ensemble.dimension
    header = "time,particle," + ",".join(f"x{i}" for i in range(d))
    with open(path, "w") as fh:
        fh.write(header + "\n")
        for t, ens in aldi_run.snapshots:
            t_txt = repr(float(t))
            for j, row in enumerate(ens.xs):
                coords = ",".join(repr(float(v)) for v in row)
                fh.write(f"{t_txt},{j},{coords}\n")
