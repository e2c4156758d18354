"""Domain types, Gaussian prior math, ensemble statistics, and seeded random streams.

Everything downstream (the interacting-particle sampler, the mixture proposal,
the estimators) is built on the handful of primitives in this module.  All
ensemble statistics use the 1/J normalization so that the square-root identity
``S @ S.T == C`` holds exactly.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy import linalg

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
]


def _as_particles(ensemble) -> np.ndarray:
    """Accept an Ensemble or a plain (J, d) array and return float64 particles."""
    xs = np.asarray(getattr(ensemble, "xs", ensemble), dtype=float)
    if xs.ndim != 2:
        raise ValueError(f"expected particles of shape (J, d), got {xs.shape}")
    return xs


@dataclass(frozen=True)
class Ensemble:
    """Ordered collection of J particle states in R^d, stored as a (J, d) array."""

    xs: np.ndarray

    def __post_init__(self):
        xs = np.array(self.xs, dtype=float)
        if xs.ndim != 2:
            raise ValueError(f"particles must form a (J, d) array, got shape {xs.shape}")
        if xs.shape[0] < 2:
            raise ValueError("an ensemble needs at least two particles")
        if not np.all(np.isfinite(xs)):
            raise ValueError("ensemble contains non-finite particle coordinates")
        object.__setattr__(self, "xs", xs)

    @property
    def size(self) -> int:
        return self.xs.shape[0]

    @property
    def dimension(self) -> int:
        return self.xs.shape[1]

    def __array__(self, dtype=None, copy=None):
        if dtype is None:
            return self.xs
        return self.xs.astype(dtype)


def ensemble_mean(ensemble) -> np.ndarray:
    """Empirical mean m(X) = (1/J) sum_j x_j."""
    return _as_particles(ensemble).mean(axis=0)


def ensemble_covariance(ensemble) -> np.ndarray:
    """Empirical covariance C(X) with 1/J normalization (not 1/(J-1))."""
    xs = _as_particles(ensemble)
    dev = xs - xs.mean(axis=0)
    return dev.T @ dev / xs.shape[0]


def ensemble_sqrt(ensemble) -> np.ndarray:
    """Ensemble square root S = (X - m 1_J^T) / sqrt(J), a (d, J) matrix.

    Satisfies S @ S.T == ensemble_covariance exactly in exact arithmetic.
    """
    xs = _as_particles(ensemble)
    dev = xs - xs.mean(axis=0)
    return dev.T / np.sqrt(xs.shape[0])


def cross_correlation(ensemble, g_values) -> np.ndarray:
    """Sample cross-correlation D(X) between particles and scalar forward values.

    D(X) = (1/J) sum_j (x_j - m)(g_j - mean(g)), a d-vector for scalar g.
    """
    xs = _as_particles(ensemble)
    g = np.asarray(g_values, dtype=float)
    if g.shape != (xs.shape[0],):
        raise ValueError(f"g_values must have shape ({xs.shape[0]},), got {g.shape}")
    dev = xs - xs.mean(axis=0)
    return dev.T @ (g - g.mean()) / xs.shape[0]


@dataclass
class GaussianPrior:
    """Gaussian prior N(mean, covariance) with cached Cholesky factor."""

    mean: np.ndarray
    covariance: np.ndarray
    _chol: np.ndarray = field(init=False, repr=False)
    _log_norm: float = field(init=False, repr=False)

    def __post_init__(self):
        self.mean = np.atleast_1d(np.asarray(self.mean, dtype=float))
        self.covariance = np.atleast_2d(np.asarray(self.covariance, dtype=float))
        d = self.mean.shape[0]
        if self.covariance.shape != (d, d):
            raise ValueError(
                f"covariance shape {self.covariance.shape} does not match dimension {d}"
            )
        if not np.allclose(self.covariance, self.covariance.T, rtol=0, atol=1e-12):
            raise ValueError("covariance must be symmetric")
        try:
            self._chol = np.linalg.cholesky(self.covariance)
        except np.linalg.LinAlgError as exc:
            raise ValueError("covariance must be positive definite") from exc
        # same expression as the mixture component normalizer, so a
        # one-component mixture built from this prior matches it bit for bit
        self._log_norm = -0.5 * d * np.log(2.0 * np.pi) - np.sum(
            np.log(np.diag(self._chol))
        )

    @property
    def dimension(self) -> int:
        return self.mean.shape[0]

    def precision_apply(self, v) -> np.ndarray:
        """Apply the precision matrix: P0^{-1} v, vectorized over leading axes."""
        v = np.asarray(v, dtype=float)
        flat = np.atleast_2d(v.reshape(-1, self.dimension))
        out = linalg.cho_solve((self._chol, True), flat.T, check_finite=False).T
        return out.reshape(v.shape)

    def log_density(self, x) -> np.ndarray:
        """ln rho0(x) including the normalization constant, vectorized."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dimension)
        z = linalg.solve_triangular(
            self._chol, (flat - self.mean).T, lower=True, check_finite=False
        )
        out = self._log_norm - 0.5 * np.sum(z * z, axis=0)
        return out.reshape(x.shape[:-1])

    def grad_log_density(self, x) -> np.ndarray:
        """grad ln rho0(x) = -P0^{-1}(x - m0), vectorized."""
        x = np.asarray(x, dtype=float)
        return -self.precision_apply(x - self.mean)

    def sample(self, n: int, rng: np.random.Generator) -> np.ndarray:
        """Draw n independent samples, shape (n, d)."""
        z = rng.standard_normal((n, self.dimension))
        return self.mean + z @ self._chol.T


@dataclass(frozen=True)
class SmoothingConfig:
    """Smoothing width delta and observation-noise variance R of the tempered posterior."""

    delta: float
    noise_variance: float

    def __post_init__(self):
        if not self.delta > 0:
            raise ValueError(f"delta must be positive, got {self.delta}")
        if not self.noise_variance > 0:
            raise ValueError(f"noise_variance must be positive, got {self.noise_variance}")


@dataclass
class RareEventProblem:
    """A rare-event estimation problem: limit state G, optional gradient, Gaussian prior.

    The failure domain is {x : G(x) <= 0}.  ``limit_state`` must be vectorized
    over leading axes: it maps arrays of shape (..., d) to shape (...).  When
    ``stochastic_forward`` is set, the limit state is a random map and takes a
    second random-generator argument.
    """

    dimension: int
    limit_state: Callable
    prior: GaussianPrior
    limit_state_gradient: Optional[Callable] = None
    stochastic_forward: bool = False
    name: str = ""

    def __post_init__(self):
        if self.prior.dimension != self.dimension:
            raise ValueError(
                f"prior dimension {self.prior.dimension} != problem dimension {self.dimension}"
            )

    @property
    def has_gradient(self) -> bool:
        return self.limit_state_gradient is not None

    def evaluate_limit_state(self, x, rng: np.random.Generator | None = None):
        if self.stochastic_forward:
            if rng is None:
                raise ValueError(
                    f"problem {self.name!r} has a stochastic forward map and needs a stream"
                )
            return self.limit_state(x, rng)
        return self.limit_state(x)

    def evaluate_gradient(self, x):
        if self.limit_state_gradient is None:
            raise ValueError(f"problem {self.name!r} provides no limit-state gradient")
        return self.limit_state_gradient(x)


_WORD_MASK = (1 << 64) - 1


def _label_word(label) -> int:
    if isinstance(label, (int, np.integer)) and not isinstance(label, bool):
        return int(label) & _WORD_MASK
    digest = hashlib.blake2b(str(label).encode("utf-8"), digest_size=8).digest()
    return int.from_bytes(digest, "little")


def derive_stream(seed: int, labels=()) -> np.random.Generator:
    """Deterministic substream keyed by (seed, label path).

    Identical (seed, labels) always reproduce the same draws; distinct label
    paths give statistically independent streams.  Built on the counter-based
    Philox generator so draws never depend on evaluation order elsewhere.
    """
    entropy = [int(seed) & _WORD_MASK]
    entropy.extend(_label_word(label) for label in labels)
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(entropy)))
