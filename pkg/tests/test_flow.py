"""Tests for the conditional flow matching math and the Euler solver."""

import numpy as np
import pytest
import torch
from hypothesis import given
from hypothesis import strategies as st

from melrefine.flow import (
    FlowConfig,
    FlowSample,
    NonFiniteStateError,
    euler_integrate,
    flow_matching_loss,
    interpolate,
    sample_prior,
    target_velocity,
)


def randn(*shape, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(*shape, generator=g, dtype=torch.float64)


class TestFlowConfig:
    def test_defaults(self):
        cfg = FlowConfig()
        assert cfg.sigma_min == 0.0
        assert cfg.n_steps == 64

    @pytest.mark.parametrize("sigma", [-0.1, 1.0, 1.5])
    def test_rejects_bad_sigma(self, sigma):
        with pytest.raises(ValueError):
            FlowConfig(sigma_min=sigma)

    def test_rejects_bad_steps(self):
        with pytest.raises(ValueError):
            FlowConfig(n_steps=0)


class TestSamplePrior:
    def test_deterministic_per_seed(self):
        a = sample_prior((3, 5), torch.Generator().manual_seed(9))
        b = sample_prior((3, 5), torch.Generator().manual_seed(9))
        assert torch.equal(a, b)

    def test_moments(self):
        x = sample_prior((100_000,), torch.Generator().manual_seed(0))
        assert -0.02 < float(x.mean()) < 0.02
        assert 0.97 < float(x.var()) < 1.03

    def test_shape(self):
        assert sample_prior((2, 94, 128), torch.Generator().manual_seed(1)).shape == (2, 94, 128)


class TestInterpolate:
    def test_endpoint_t0(self):
        x0, x1 = randn(4, 7, seed=1), randn(4, 7, seed=2)
        assert torch.equal(interpolate(x0, x1, 0.0), x0)

    def test_endpoint_t1_sigma0(self):
        x0, x1 = randn(4, 7, seed=1), randn(4, 7, seed=2)
        assert torch.equal(interpolate(x0, x1, 1.0, sigma_min=0.0), x1)

    def test_quarter_point(self):
        x0 = torch.full((3,), 2.0, dtype=torch.float64)
        x1 = torch.full((3,), 6.0, dtype=torch.float64)
        out = interpolate(x0, x1, 0.25)
        np.testing.assert_allclose(out.numpy(), 3.0)

    def test_sigma_min_formula(self):
        x0 = torch.ones(2, dtype=torch.float64)
        x1 = torch.zeros(2, dtype=torch.float64)
        out = interpolate(x0, x1, 0.5, sigma_min=0.1)
        np.testing.assert_allclose(out.numpy(), 0.55)

    def test_shape_mismatch(self):
        with pytest.raises(ValueError, match="shape"):
            interpolate(randn(3), randn(4), 0.5)

    @given(
        t=st.floats(0.0, 1.0),
        sigma=st.floats(0.0, 0.99),
        h=st.floats(1e-3, 0.2),
    )
    def test_derivative_matches_target(self, t, sigma, h):
        # The path is affine in t, so any central difference is exact.
        x0, x1 = randn(6, seed=3), randn(6, seed=4)
        lo, hi = max(t - h, 0.0), min(t + h, 1.0)
        if hi - lo < 1e-6:
            return
        diff = (interpolate(x0, x1, hi, sigma) - interpolate(x0, x1, lo, sigma)) / (hi - lo)
        expected = target_velocity(x0, x1, sigma)
        assert float((diff - expected).abs().max()) < 1e-10


class TestTargetVelocity:
    def test_fixed_point(self):
        x = randn(5, seed=6)
        assert torch.equal(target_velocity(x, x), torch.zeros_like(x))

    def test_direct_formula(self):
        x0 = torch.tensor([1.0, 2.0], dtype=torch.float64)
        x1 = torch.tensor([3.0, 5.0], dtype=torch.float64)
        np.testing.assert_allclose(target_velocity(x0, x1).numpy(), [2.0, 3.0])

    def test_finite_difference_oracle(self):
        x0, x1 = randn(4, 8, seed=7), randn(4, 8, seed=8)
        h = 1e-4
        diff = (interpolate(x0, x1, 0.3 + h) - interpolate(x0, x1, 0.3 - h)) / (2 * h)
        expected = target_velocity(x0, x1)
        rel = float((diff - expected).abs().max() / expected.abs().max())
        assert rel < 1e-6


class TestFlowMatchingLoss:
    def test_zero_at_equality(self):
        x = randn(2, 5, 3, seed=9)
        assert float(flow_matching_loss(x, x)) == 0.0

    def test_constant_offset(self):
        x = randn(2, 5, 3, seed=10)
        mask = torch.ones(2, 5, dtype=torch.bool)
        assert float(flow_matching_loss(x + 0.5, x, mask)) == pytest.approx(0.25)

    def test_mask_excludes_frames(self):
        predicted = torch.zeros(1, 4, 3, dtype=torch.float64)
        target = torch.zeros(1, 4, 3, dtype=torch.float64)
        predicted[0, 2:] = 77.0  # error lives only in masked-out frames
        mask = torch.tensor([[True, True, False, False]])
        assert float(flow_matching_loss(predicted, target, mask)) == 0.0

    def test_empty_mask(self):
        x = randn(1, 3, 2, seed=11)
        with pytest.raises(ValueError, match="empty"):
            flow_matching_loss(x, x, torch.zeros(1, 3, dtype=torch.bool))

    def test_nonnegative_and_zero_iff_equal(self):
        a, b = randn(2, 4, 3, seed=12), randn(2, 4, 3, seed=13)
        mask = torch.ones(2, 4, dtype=torch.bool)
        assert float(flow_matching_loss(a, b, mask)) > 0.0


class TestFlowSample:
    def test_draw_is_consistent(self):
        x1 = randn(2, 6, 4, seed=14)
        sample = FlowSample.draw(x1, FlowConfig(), torch.Generator().manual_seed(5))
        assert torch.equal(sample.xt, interpolate(sample.x0, x1, sample.t))
        assert torch.equal(sample.target, target_velocity(sample.x0, x1))
        assert 0.0 <= sample.t <= 1.0

    def test_rejects_inconsistent_xt(self):
        x = randn(3, seed=15)
        with pytest.raises(ValueError):
            FlowSample(t=1.5, x0=x, x1=x, xt=x, target=x)


class TestEulerIntegrate:
    @pytest.mark.parametrize("n_steps", [1, 3, 64])
    def test_constant_field_exact(self, n_steps):
        x0 = randn(4, seed=16)
        u = randn(4, seed=17)
        out = euler_integrate(lambda x, t, c: u, x0, None, n_steps)
        assert torch.allclose(out, x0 + u, rtol=0, atol=1e-13)

    def test_exponential_closed_form(self):
        # x' = x from 1 integrates to the compound-growth product (1 + 1/n)^n.
        out = euler_integrate(lambda x, t, c: x, torch.ones(1, dtype=torch.float64), None, 64)
        assert abs(float(out) - (1 + 1 / 64) ** 64) < 1e-12

    @pytest.mark.parametrize("n_steps", [1, 8, 64])
    def test_recovers_x1_with_true_field(self, n_steps):
        x0, x1 = randn(3, 9, seed=18), randn(3, 9, seed=19)
        field = target_velocity(x0, x1)
        out = euler_integrate(lambda x, t, c: field, x0, None, n_steps)
        rel = float((out - x1).abs().max() / x1.abs().max())
        assert rel < 1e-6

    def test_reports_non_finite_step(self):
        def blow_up(x, t, c):
            return x * float("nan") if t >= 0.5 else x

        with pytest.raises(NonFiniteStateError) as exc_info:
            euler_integrate(blow_up, torch.ones(2, dtype=torch.float64), None, 4)
        assert exc_info.value.step == 2

    def test_rejects_zero_steps(self):
        with pytest.raises(ValueError):
            euler_integrate(lambda x, t, c: x, torch.ones(1), None, 0)
