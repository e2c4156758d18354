"""Ensemble statistics, Gaussian prior math, and stream derivation."""

import numpy as np
import pytest

from failprob.core import (
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


def brute_force_mean_cov(xs):
    """Independent summation oracle for the ensemble statistics."""
    xs = np.asarray(xs, dtype=float)
    J, d = xs.shape
    m = np.zeros(d)
    for row in xs:
        m += row
    m /= J
    c = np.zeros((d, d))
    for row in xs:
        dev = row - m
        c += np.outer(dev, dev)
    return m, c / J


class TestEnsembleStatistics:
    def test_mean_two_points(self):
        assert np.allclose(ensemble_mean([[0.0, 0.0], [2.0, 2.0]]), [1.0, 1.0])

    def test_mean_constant_ensemble(self):
        xs = np.tile([3.5, -1.0], (7, 1))
        assert np.allclose(ensemble_mean(xs), [3.5, -1.0])

    def test_mean_law_of_large_numbers(self):
        xs = derive_stream(11, ["lln"]).standard_normal((1000, 2))
        assert np.all(np.abs(ensemble_mean(xs)) < 0.1)

    def test_covariance_two_points(self):
        c = ensemble_covariance([[-1.0, 0.0], [1.0, 0.0]])
        assert np.allclose(c, [[1.0, 0.0], [0.0, 0.0]])

    def test_covariance_constant_is_zero(self):
        xs = np.tile([1.0, 2.0, 3.0], (5, 1))
        assert np.allclose(ensemble_covariance(xs), 0.0)

    def test_covariance_matches_brute_force(self):
        xs = np.array([[0.0, 0.0], [1.0, 1.0], [2.0, 0.0]])
        m_oracle, c_oracle = brute_force_mean_cov(xs)
        assert np.allclose(m_oracle, [1.0, 1.0 / 3.0])
        np.testing.assert_allclose(ensemble_covariance(xs), c_oracle, atol=1e-15)
        np.testing.assert_allclose(ensemble_mean(xs), m_oracle, atol=1e-15)

    def test_covariance_uses_1_over_J(self):
        xs = derive_stream(5, ["cov"]).standard_normal((8, 3))
        c = ensemble_covariance(xs)
        np.testing.assert_allclose(c, np.cov(xs.T, bias=True), atol=1e-14)
        assert not np.allclose(c, np.cov(xs.T, bias=False))

    def test_sqrt_constant_ensemble(self):
        xs = np.tile([1.0, -1.0], (4, 1))
        assert np.allclose(ensemble_sqrt(xs), 0.0)

    def test_sqrt_two_point_formula(self):
        s = ensemble_sqrt([[-1.0, 0.0], [1.0, 0.0]])
        expected = np.array([[-1.0 / np.sqrt(2.0), 1.0 / np.sqrt(2.0)], [0.0, 0.0]])
        np.testing.assert_allclose(s, expected, atol=1e-15)
        np.testing.assert_allclose(s @ s.T, [[1.0, 0.0], [0.0, 0.0]], atol=1e-15)

    def test_sqrt_factorization_small(self):
        xs = derive_stream(6, ["sqrt"]).standard_normal((10, 3))
        s = ensemble_sqrt(xs)
        assert np.max(np.abs(s @ s.T - ensemble_covariance(xs))) <= 1e-14

    @pytest.mark.parametrize("d,J", [(1, 2), (2, 50), (5, 400), (10, 10000)])
    def test_sqrt_factorization_across_sizes(self, d, J):
        xs = derive_stream(7, ["sqrt", d, J]).standard_normal((J, d)) * 3.0
        s = ensemble_sqrt(xs)
        assert s.shape == (d, J)
        assert np.max(np.abs(s @ s.T - ensemble_covariance(xs))) <= 1e-12

    def test_affine_equivariance_of_statistics(self):
        rng = derive_stream(8, ["affine"])
        for trial in range(10):
            d = int(rng.integers(1, 6))
            xs = rng.standard_normal((30, d))
            a = rng.standard_normal((d, d)) + 2.0 * np.eye(d)
            b = rng.standard_normal(d)
            ys = xs @ a.T + b
            scale = max(1.0, np.max(np.abs(a)))
            m, c, s = ensemble_mean(xs), ensemble_covariance(xs), ensemble_sqrt(xs)
            assert np.max(np.abs(ensemble_mean(ys) - (a @ m + b))) / scale <= 1e-10
            assert np.max(np.abs(ensemble_covariance(ys) - a @ c @ a.T)) / scale**2 <= 1e-10
            assert np.max(np.abs(ensemble_sqrt(ys) - a @ s)) / scale <= 1e-10


class TestCrossCorrelation:
    def test_constant_forward_values(self):
        xs = derive_stream(1, ["cc"]).standard_normal((6, 2))
        assert np.allclose(cross_correlation(xs, np.full(6, 2.5)), 0.0)

    def test_two_point_direct(self):
        d = cross_correlation([[-1.0], [1.0]], [-1.0, 1.0])
        assert np.allclose(d, [1.0])

    def test_linear_map_identity(self):
        rng = derive_stream(2, ["cc-lin"])
        xs = rng.standard_normal((200, 4))
        a = rng.standard_normal(4)
        d = cross_correlation(xs, xs @ a)
        expected = ensemble_covariance(xs) @ a
        assert np.max(np.abs(d - expected)) / np.max(np.abs(expected)) <= 1e-12

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ValueError):
            cross_correlation([[0.0], [1.0]], [1.0, 2.0, 3.0])


class TestEnsembleType:
    def test_requires_two_particles(self):
        with pytest.raises(ValueError):
            Ensemble(np.zeros((1, 3)))

    def test_rejects_non_finite(self):
        with pytest.raises(ValueError):
            Ensemble(np.array([[0.0, np.inf], [1.0, 2.0]]))

    def test_array_protocol(self):
        ens = Ensemble(np.arange(6.0).reshape(3, 2))
        assert ens.size == 3 and ens.dimension == 2
        assert np.allclose(ensemble_mean(ens), [2.0, 3.0])


class TestGaussianPrior:
    def test_log_density_standard_normal_origin(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        assert float(prior.log_density(np.zeros(2))) == pytest.approx(
            -np.log(2.0 * np.pi), rel=1e-12
        )

    def test_log_density_shifted_scaled(self):
        prior = GaussianPrior(np.array([-2.0, -2.0]), 0.8 * np.eye(2))
        value = float(prior.log_density(np.array([-2.0, -2.0])))
        assert value == pytest.approx(-np.log(2.0 * np.pi * 0.8), rel=1e-12)

    def test_density_integrates_to_one(self):
        prior = GaussianPrior(np.array([0.5, -0.25]), np.array([[1.2, 0.3], [0.3, 0.8]]))
        n, span = 600, 8.0
        stds = np.sqrt(np.diag(prior.covariance))
        axes = [
            np.linspace(prior.mean[i] - span * stds[i], prior.mean[i] + span * stds[i], n)
            for i in range(2)
        ]
        dx = (axes[0][1] - axes[0][0]) * (axes[1][1] - axes[1][0])
        xg, yg = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([xg.ravel(), yg.ravel()], axis=-1)
        total = np.sum(np.exp(prior.log_density(pts))) * dx
        assert total == pytest.approx(1.0, abs=1e-6)

    def test_gradient_examples(self):
        prior = GaussianPrior(np.zeros(2), np.eye(2))
        assert np.allclose(prior.grad_log_density(np.zeros(2)), 0.0)
        assert np.allclose(prior.grad_log_density(np.array([1.0, 2.0])), [-1.0, -2.0])

    def test_gradient_matches_finite_differences(self):
        prior = GaussianPrior(np.array([0.7, -0.3]), np.array([[1.5, -0.4], [-0.4, 2.0]]))
        rng = derive_stream(3, ["prior-fd"])
        h = 1e-6
        for _ in range(25):
            x = rng.standard_normal(2) * 3.0
            grad = prior.grad_log_density(x)
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                fd = (prior.log_density(x + e) - prior.log_density(x - e)) / (2 * h)
                assert grad[i] == pytest.approx(float(fd), rel=1e-6, abs=1e-9)

    def test_rejects_non_spd(self):
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(2), -np.eye(2))
        with pytest.raises(ValueError):
            GaussianPrior(np.zeros(2), np.array([[1.0, 0.5], [0.2, 1.0]]))

    def test_sampling_moments(self):
        prior = GaussianPrior(np.array([2.0, -1.0]), np.array([[2.0, 0.5], [0.5, 1.0]]))
        xs = prior.sample(200000, derive_stream(4, ["prior-samples"]))
        assert np.max(np.abs(xs.mean(axis=0) - prior.mean)) < 0.02
        assert np.max(np.abs(np.cov(xs.T) - prior.covariance)) < 0.03


class TestSmoothingConfig:
    def test_rejects_bad_values(self):
        with pytest.raises(ValueError):
            SmoothingConfig(delta=0.0, noise_variance=1.0)
        with pytest.raises(ValueError):
            SmoothingConfig(delta=0.1, noise_variance=0.0)


class TestRareEventProblem:
    def test_stochastic_forward_needs_stream(self):
        problem = RareEventProblem(
            dimension=1,
            limit_state=lambda x, rng: rng.standard_normal(),
            prior=GaussianPrior(np.zeros(1), np.eye(1)),
            stochastic_forward=True,
        )
        with pytest.raises(ValueError):
            problem.evaluate_limit_state(np.zeros(1))

    def test_missing_gradient_rejected(self):
        problem = RareEventProblem(
            dimension=1,
            limit_state=lambda x: np.asarray(x)[..., 0],
            prior=GaussianPrior(np.zeros(1), np.eye(1)),
        )
        with pytest.raises(ValueError):
            problem.evaluate_gradient(np.zeros(1))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(ValueError):
            RareEventProblem(
                dimension=2,
                limit_state=lambda x: np.asarray(x)[..., 0],
                prior=GaussianPrior(np.zeros(3), np.eye(3)),
            )


class TestDeriveStream:
    def test_determinism(self):
        a = derive_stream(42, ["aldi", 3]).standard_normal(100)
        b = derive_stream(42, ["aldi", 3]).standard_normal(100)
        assert np.array_equal(a, b)

    def test_distinct_labels_differ(self):
        a = derive_stream(42, ["aldi", 0]).standard_normal(50)
        b = derive_stream(42, ["aldi", 1]).standard_normal(50)
        assert not np.array_equal(a, b)

    def test_string_and_int_labels_distinct(self):
        a = derive_stream(0, ["1"]).standard_normal(10)
        b = derive_stream(0, [1]).standard_normal(10)
        assert not np.array_equal(a, b)

    def test_moments(self):
        draws = derive_stream(123, ["moments"]).standard_normal(100000)
        assert abs(draws.mean()) < 0.02
        assert abs(draws.var() - 1.0) < 0.02
