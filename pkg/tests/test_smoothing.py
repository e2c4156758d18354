"""Mollifier, smoothed limit state, and potential gradients."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from failprob.core import SmoothingConfig
from failprob.problems import make_convex_problem, make_saddle_problem, SaddleParams
from failprob.smoothing import (
    grad_potential,
    potential,
    psi,
    ramp,
    smooth_g,
    smooth_g_derivative,
)
from failprob.core import GaussianPrior


class TestPsi:
    def test_nonpositive_branch(self):
        assert psi(-1.0, 0.5) == 0.0
        assert psi(0.0, 0.5) == 0.0

    def test_cancellation_at_delta(self):
        for delta in (0.5, 0.01, 0.001):
            assert psi(delta, delta) == 1.0

    def test_tiny_delta_underflows_cleanly(self):
        # exponent 1/d^2 - 4/d^2 = -3e6 underflows to zero in the stable form
        assert psi(0.0005, 0.001) == 0.0

    def test_moderate_value(self):
        delta, x = 0.5, 0.25
        expected = np.exp(1.0 / delta**2 - 1.0 / x**2)
        assert psi(x, delta) == pytest.approx(expected, rel=1e-14)


class TestRamp:
    def test_midpoint_exact_half(self):
        for delta in (0.5, 1e-3, 1e-6):
            assert ramp(delta / 2.0, delta) == 0.5

    def test_saturation(self):
        assert ramp(-0.3, 1e-3) == 0.0
        assert ramp(1e-3 + 0.3, 1e-3) == 1.0
        assert ramp(0.0, 1e-3) == 0.0
        assert ramp(1e-3, 1e-3) == 1.0

    def test_matches_psi_ratio_at_moderate_delta(self):
        # both formulas representable at delta = 0.5
        delta = 0.5
        for x in np.linspace(0.01, 0.49, 25):
            direct = psi(x, delta) / (psi(x, delta) + psi(delta - x, delta))
            assert ramp(x, delta) == pytest.approx(direct, rel=1e-12)

    def test_monotone_on_strip(self):
        delta = 1e-3
        grid = np.linspace(0.0, delta, 2000)
        values = np.asarray(ramp(grid, delta))
        assert np.all(np.diff(values) >= 0.0)

    @given(
        x=st.floats(-1.0, 2.0, allow_nan=False),
        delta=st.sampled_from([1e-4, 1e-3, 1e-2, 0.5]),
    )
    def test_range(self, x, delta):
        value = ramp(x, delta)
        assert 0.0 <= value <= 1.0

    def test_complement_identity(self):
        delta = 1e-3
        xs = np.linspace(delta * 1e-6, delta * (1 - 1e-6), 1001)
        total = np.asarray(ramp(xs, delta)) + np.asarray(ramp(delta - xs, delta))
        assert np.max(np.abs(total - 1.0)) <= 1e-12


class TestSmoothG:
    def test_failure_side_zero(self):
        assert smooth_g(-1.0, 1e-3) == 0.0

    def test_symmetry_point(self):
        delta = 1e-3
        assert smooth_g(delta / 2.0, delta) == pytest.approx(delta / 4.0, rel=1e-12)

    def test_pass_through(self):
        delta = 1e-3
        assert smooth_g(2 * delta, delta) == 2 * delta

    @given(
        g=st.floats(-10.0, 10.0, allow_nan=False),
        delta=st.sampled_from([1e-4, 1e-3, 1e-2, 0.5]),
    )
    def test_zero_set_preserved(self, g, delta):
        value = smooth_g(g, delta)
        assert value >= 0.0
        if g <= 0.0:
            assert value == 0.0
        elif g >= 1e-15:
            # strictly positive off the failure set; below ~1e-15 the product
            # g * ramp(g) can underflow past the subnormal range
            assert value > 0.0

    def test_uniform_approximation_bound(self):
        delta = 1e-3
        grid = np.linspace(-2 * delta, 3 * delta, 5001)
        values = np.asarray(smooth_g(grid, delta))
        hinge = np.maximum(0.0, grid)
        assert np.max(np.abs(values - hinge)) <= delta
        assert np.all(values <= hinge + 1e-18)

    def test_monotone(self):
        delta = 1e-2
        grid = np.linspace(-delta, 2 * delta, 4001)
        values = np.asarray(smooth_g(grid, delta))
        assert np.all(np.diff(values) >= -1e-15)


class TestSmoothGDerivative:
    def test_outer_branches(self):
        delta = 1e-3
        assert smooth_g_derivative(-1.0, delta) == 0.0
        assert smooth_g_derivative(2 * delta, delta) == 1.0
        assert smooth_g_derivative(0.0, delta) == 0.0
        assert smooth_g_derivative(delta, delta) == 1.0

    def test_matches_finite_differences_moderate_delta(self):
        delta, g = 0.5, 0.25
        h = 1e-7
        fd = (smooth_g(g + h, delta) - smooth_g(g - h, delta)) / (2 * h)
        assert smooth_g_derivative(g, delta) == pytest.approx(fd, rel=1e-5)

    @pytest.mark.parametrize("delta", [1e-2, 1e-3, 0.5])
    def test_matches_finite_differences_interior(self, delta):
        for frac in (0.2, 0.35, 0.5, 0.65, 0.8):
            g = frac * delta
            # step chosen so the sigmoid argument moves by <= 0.01: the
            # transition is violently curved for small delta
            slope = 2.0 / g**3 + 2.0 / (delta - g) ** 3
            h = min(delta * 1e-5, 0.01 / slope)
            fd = (smooth_g(g + h, delta) - smooth_g(g - h, delta)) / (2 * h)
            analytic = smooth_g_derivative(g, delta)
            if abs(fd) < 1e-250:
                # saturated zone: the true derivative is beneath subnormal
                # resolution, both sides must agree it is numerically zero
                assert abs(analytic) < 1e-250
            else:
                assert analytic == pytest.approx(fd, rel=1e-5)


class TestPotential:
    def setup_method(self):
        self.problem = make_convex_problem("standard")
        self.cfg = SmoothingConfig(delta=1e-3, noise_variance=0.01)

    def test_inside_failure_prior_only(self):
        x = np.array([5.0, 5.0])  # G(5,5) < 0
        value = float(potential(x, self.problem, self.cfg))
        expected = -float(self.problem.prior.log_density(x))
        assert value == pytest.approx(expected, rel=1e-12)

    def test_closed_form_at_origin(self):
        value = float(potential(np.zeros(2), self.problem, self.cfg))
        expected = 2.5**2 / 0.02 + np.log(2.0 * np.pi)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_continuity_across_boundary(self):
        # values along a segment crossing {G = 0}; refinement shrinks the jumps
        start, end = np.array([1.0, 1.0]), np.array([2.5, 2.5])

        def max_jump(n):
            ts = np.linspace(0.0, 1.0, n)[:, None]
            pts = start + ts * (end - start)
            values = np.asarray(potential(pts, self.problem, self.cfg))
            return float(np.max(np.abs(np.diff(values))))

        coarse, fine = max_jump(500), max_jump(8000)
        assert fine < coarse / 4.0


class TestGradPotential:
    def test_prior_term_only_inside_failure(self):
        problem = make_convex_problem("standard")
        cfg = SmoothingConfig(delta=1e-3, noise_variance=0.01)
        x = np.array([5.0, 5.0])
        grad = grad_potential(x, problem, cfg)
        np.testing.assert_allclose(grad, x, rtol=1e-12)

    def test_saddle_closed_form(self):
        params = SaddleParams(decay_rate=1.0, growth_rate=1.0, horizon=1.0, threshold=0.5)
        prior = GaussianPrior(np.array([-2.0, -2.0]), 0.5 * np.eye(2))
        problem = make_saddle_problem(params, prior)
        x = np.array([1.0, 0.0])
        g_value = float(problem.evaluate_limit_state(x))
        assert g_value == pytest.approx((1 - np.exp(-2)) / 2 - 0.5, abs=1e-12)
        assert g_value < 0
        grad = grad_potential(x, problem, SmoothingConfig(1e-3, 0.5))
        np.testing.assert_allclose(grad, [6.0, 4.0], rtol=1e-12)

    @pytest.mark.parametrize("factory", [make_convex_problem, make_saddle_problem])
    def test_matches_finite_differences_off_kink(self, factory):
        from failprob.core import derive_stream

        problem = factory()
        cfg = SmoothingConfig(delta=1e-3, noise_variance=0.01)
        rng = derive_stream(9, ["fd", problem.name])
        checked = 0
        while checked < 25:
            x = problem.prior.sample(1, rng)[0]
            if abs(float(problem.evaluate_limit_state(x))) <= 10 * cfg.delta:
                continue
            checked += 1
            grad = grad_potential(x, problem, cfg)
            h = 1e-6
            for i in range(2):
                e = np.zeros(2)
                e[i] = h
                fd = (
                    float(potential(x + e, problem, cfg))
                    - float(potential(x - e, problem, cfg))
                ) / (2 * h)
                assert grad[i] == pytest.approx(fd, rel=1e-5, abs=1e-7)

    def test_requires_gradient(self):
        from failprob.problems import make_vortex_problem

        problem = make_vortex_problem()
        with pytest.raises(ValueError):
            grad_potential(np.zeros(6), problem, SmoothingConfig(1e-3, 0.01))
