"""Gaussian-mixture proposals: EM fitting, log-density evaluation, sampling.

The mixture fitted to the final sampler ensemble is the importance-sampling
proposal.  Covariances are full (failure sets are anisotropic and rotated) and
every M-step adds a small diagonal floor so the fitted density stays strictly
positive even when the particle cloud is nearly degenerate along the failure
boundary.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import linalg
from scipy.spatial.distance import pdist
from scipy.special import logsumexp

from .core import GaussianPrior, derive_stream

__all__ = ["GaussianMixture", "EmConfig", "fit_em", "log_density", "sample",
           "save_mixture", "load_mixture"]

_COLLAPSE_WEIGHT = 1e-8
_MONOTONE_SLACK = 1e-9


@dataclass
class GaussianMixture:
    """K-component Gaussian mixture with full covariances."""

    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    _chols: np.ndarray = field(init=False, repr=False)
    _log_norms: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        w = np.atleast_1d(np.asarray(self.weights, dtype=float))
        mu = np.atleast_2d(np.asarray(self.means, dtype=float))
        cov = np.asarray(self.covariances, dtype=float)
        if cov.ndim == 2:
            cov = cov[None, :, :]
        k, d = mu.shape
        if w.shape != (k,) or cov.shape != (k, d, d):
            raise ValueError(
                f"inconsistent mixture shapes: weights {w.shape}, means {mu.shape}, "
                f"covariances {cov.shape}"
            )
        if np.any(w < 0):
            raise ValueError("mixture weights must be nonnegative")
        total = w.sum()
        if not np.isclose(total, 1.0, rtol=0, atol=1e-6):
            raise ValueError(f"mixture weights must sum to 1, got {total}")
        w = w / total
        chols = np.empty_like(cov)
        log_norms = np.empty(k)
        for i in range(k):
            if not np.allclose(cov[i], cov[i].T, rtol=0, atol=1e-12):
                raise ValueError(f"covariance {i} is not symmetric")
            try:
                chols[i] = np.linalg.cholesky(cov[i])
            except np.linalg.LinAlgError as exc:
                raise ValueError(f"covariance {i} is not positive definite") from exc
            log_norms[i] = -0.5 * d * np.log(2.0 * np.pi) - np.sum(
                np.log(np.diag(chols[i]))
            )
        self.weights = w
        self.means = mu
        self.covariances = cov
        self._chols = chols
        self._log_norms = log_norms

    @property
    def n_components(self) -> int:
        return self.weights.shape[0]

    @property
    def dimension(self) -> int:
        return self.means.shape[1]

    @classmethod
    def from_gaussian(cls, prior: GaussianPrior) -> "GaussianMixture":
        """Single-component mixture equal to a Gaussian prior."""
        return cls(
            weights=np.array([1.0]),
            means=prior.mean[None, :],
            covariances=prior.covariance[None, :, :],
        )

    def component_log_densities(self, x) -> np.ndarray:
        """Per-component log N(x; mu_k, Sigma_k), shape (..., K)."""
        x = np.asarray(x, dtype=float)
        flat = x.reshape(-1, self.dimension)
        out = np.empty((flat.shape[0], self.n_components))
        for i in range(self.n_components):
            z = linalg.solve_triangular(
                self._chols[i], (flat - self.means[i]).T, lower=True, check_finite=False
            )
            out[:, i] = self._log_norms[i] - 0.5 * np.sum(z * z, axis=0)
        return out.reshape(x.shape[:-1] + (self.n_components,))

    def log_density(self, x) -> np.ndarray:
        """log sum_k w_k N(x; mu_k, Sigma_k) via log-sum-exp, vectorized."""
        comp = self.component_log_densities(x)
        return logsumexp(comp + np.log(self.weights), axis=-1)

    def sample(self, n: int, stream: np.random.Generator) -> np.ndarray:
        """Draw n points: component by weight, then a Gaussian draw.

        A single-component mixture consumes the stream exactly like
        ``GaussianPrior.sample``, so proposal-equals-prior comparisons are
        reproducible draw for draw.
        """
        if n < 1:
            raise ValueError(f"sample count must be >= 1, got {n}")
        if self.n_components == 1:
            z = stream.standard_normal((n, self.dimension))
            return self.means[0] + z @ self._chols[0].T
        comp = stream.choice(self.n_components, size=n, p=self.weights)
        z = stream.standard_normal((n, self.dimension))
        return self.means[comp] + np.einsum("nij,nj->ni", self._chols[comp], z)


def log_density(mixture: GaussianMixture, x) -> np.ndarray:
    return mixture.log_density(x)


def sample(mixture: GaussianMixture, n: int, stream: np.random.Generator) -> np.ndarray:
    return mixture.sample(n, stream)


@dataclass(frozen=True)
class EmConfig:
    """EM fitting settings; ``covariance_floor=None`` derives the floor from
    the median pairwise sample distance."""

    components: int = 1
    max_iterations: int = 200
    log_likelihood_tolerance: float = 1e-8
    covariance_floor: float | None = None
    init_seed: int = 0

    def __post_init__(self):
        if self.components < 1:
            raise ValueError(f"components must be >= 1, got {self.components}")
        if self.max_iterations < 1:
            raise ValueError("max_iterations must be >= 1")
        if not self.log_likelihood_tolerance > 0:
            raise ValueError("log_likelihood_tolerance must be positive")
        if self.covariance_floor is not None and self.covariance_floor < 0:
            raise ValueError("covariance_floor must be nonnegative")


def _default_floor(xs: np.ndarray) -> float:
    # 1e-6 * (median pairwise distance)^2; particle clouds hugging the failure
    # boundary can be near-degenerate in the normal direction
    n = xs.shape[0]
    if n > 2000:
        idx = np.linspace(0, n - 1, 2000).astype(int)
        xs = xs[idx]
    med = float(np.median(pdist(xs))) if xs.shape[0] > 1 else 0.0
    return 1e-6 * med**2 if med > 0 else 1e-12


def _kmeanspp_centers(xs: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = xs.shape[0]
    centers = [xs[rng.integers(n)]]
    for _ in range(k - 1):
        d2 = np.min(
            np.sum((xs[:, None, :] - np.asarray(centers)[None, :, :]) ** 2, axis=-1),
            axis=1,
        )
        total = d2.sum()
        probs = d2 / total if total > 0 else np.full(n, 1.0 / n)
        centers.append(xs[rng.choice(n, p=probs)])
    return np.asarray(centers)


def _e_step(xs, weights, means, chols, log_norms):
    n, _ = xs.shape
    k = weights.shape[0]
    comp = np.empty((n, k))
    for i in range(k):
        z = linalg.solve_triangular(chols[i], (xs - means[i]).T, lower=True, check_finite=False)
        comp[:, i] = log_norms[i] - 0.5 * np.sum(z * z, axis=0)
    joint = comp + np.log(weights)
    norm = logsumexp(joint, axis=1)
    return np.exp(joint - norm[:, None]), float(norm.mean())


def fit_em(samples, cfg: EmConfig, return_history: bool = False):
    """Fit a K-component Gaussian mixture to samples by EM.

    Parameters
    ----------
    samples : array_like, shape (N, d)
        Fitting data; requires N >= K (d + 1).
    cfg : EmConfig
        Number of components, stopping rule, covariance floor, init seed.
    return_history : bool
        Also return the per-iteration average log-likelihood sequence.

    Returns
    -------
    GaussianMixture, or (GaussianMixture, list of float) with history.

    The average log-likelihood is nondecreasing along the iterations (a
    decrease beyond 1e-9, possible in principle because of the covariance
    floor, stops the iteration and keeps the previous parameters).  Components
    whose weight collapses below 1e-8 are dropped with a warning.
    """
    xs = np.asarray(samples, dtype=float)
    if xs.ndim != 2:
        raise ValueError(f"samples must form an (N, d) array, got shape {xs.shape}")
    n, d = xs.shape
    k = cfg.components
    if n < k * (d + 1):
        raise ValueError(
            f"EM with K={k} components in dimension {d} needs at least "
            f"{k * (d + 1)} samples, got {n}"
        )
    floor = cfg.covariance_floor if cfg.covariance_floor is not None else _default_floor(xs)

    rng = derive_stream(cfg.init_seed, ["em", "init"])
    means = _kmeanspp_centers(xs, k, rng)
    overall = np.cov(xs, rowvar=False, bias=True).reshape(d, d) + (floor + 1e-12) * np.eye(d)
    covs = np.repeat(overall[None, :, :], k, axis=0)
    weights = np.full(k, 1.0 / k)

    def factorize(covs):
        chols = np.linalg.cholesky(covs)
        log_norms = -0.5 * d * np.log(2.0 * np.pi) - np.sum(
            np.log(np.diagonal(chols, axis1=1, axis2=2)), axis=1
        )
        return chols, log_norms

    chols, log_norms = factorize(covs)
    history: list[float] = []
    prev_params = (weights, means, covs)

    for _ in range(cfg.max_iterations):
        resp, avg_ll = _e_step(xs, weights, means, chols, log_norms)
        if history and avg_ll < history[-1] - _MONOTONE_SLACK:
            weights, means, covs = prev_params
            break
        converged = history and abs(avg_ll - history[-1]) < cfg.log_likelihood_tolerance
        history.append(avg_ll)
        if converged:
            break
        prev_params = (weights, means, covs)

        # M-step
        nk = resp.sum(axis=0)
        weights = nk / n
        means = (resp.T @ xs) / nk[:, None]
        covs = np.empty((k, d, d))
        for i in range(k):
            dev = xs - means[i]
            covs[i] = (resp[:, i][:, None] * dev).T @ dev / nk[i] + floor * np.eye(d)

        alive = weights >= _COLLAPSE_WEIGHT
        if not np.all(alive):
            dropped = int((~alive).sum())
            warnings.warn(
                f"dropping {dropped} collapsed mixture component(s) with weight < "
                f"{_COLLAPSE_WEIGHT:g}",
                RuntimeWarning,
            )
            weights, means, covs = weights[alive], means[alive], covs[alive]
            weights = weights / weights.sum()
            k = weights.shape[0]
        chols, log_norms = factorize(covs)

    mixture = GaussianMixture(weights=weights, means=means, covariances=covs)
    return (mixture, history) if return_history else mixture


def save_mixture(mixture: GaussianMixture, path) -> None:
    """Serialize to a key-value text file; floats round-trip exactly."""
    payload = {
        "weights": [float(w) for w in mixture.weights],
        "means": [[float(v) for v in row] for row in mixture.means],
        "covariances": [
            [float(v) for v in cov.reshape(-1)] for cov in mixture.covariances
        ],
        "dimension": mixture.dimension,
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_mixture(path) -> GaussianMixture:
    with open(path) as fh:
        payload = json.load(fh)
    d = int(payload["dimension"])
    covs = np.array([np.reshape(c, (d, d)) for c in payload["covariances"]])
    return GaussianMixture(
        weights=np.array(payload["weights"]),
        means=np.array(payload["means"]),
        covariances=covs,
    )
