from __future__ import annotations

import numpy as np
import pytest

from dino4d.diffusion import (
    DenoiserParams,
    DiffusionSchedule,
    OracleDenoiser,
    Residual,
    ZeroDenoiser,
    build_condition,
    diffusion_loss,
    forward_noise,
    refine,
    reverse_sample,
)
from dino4d.errors import ShapeMismatch, StepOutOfRange
from dino4d.geometry import Pointmap
from dino4d.gradcheck import numerical_gradient, relative_error
from dino4d.semantic import FeatureMap
from oracles import cumprod_loop


def coarse_and_features(rng, H=6, W=6, D=4, ps=3):
    pts = rng.normal(size=(H, W, 3)) + [0, 0, 3]
    valid = rng.random((H, W)) > 0.2
    return Pointmap(pts, valid, 1, 1), FeatureMap(rng.normal(size=(H // ps, W // ps, D)), ps, 1)


class TestSchedule:
    def test_alpha_bar_matches_loop(self):
        s = DiffusionSchedule.linear(5, 1e-4, 0.2)
        np.testing.assert_allclose(s.alpha_bar, cumprod_loop(s.beta), atol=1e-12)
        np.testing.assert_allclose(s.beta, [1e-4, 0.050075, 0.10005, 0.150025, 0.2])

    def test_invariants(self):
        s = DiffusionSchedule.linear()
        assert s.num_steps == 5
        assert s.alpha_bar[0] == 1 - s.beta[0]
        assert np.all(np.diff(s.alpha_bar) < 0)
        assert np.all((s.alpha_bar > 0) & (s.alpha_bar < 1))

    def test_bad_beta(self):
        with pytest.raises(ValueError):
            DiffusionSchedule(np.array([0.1, 1.0]))

    def test_step_range(self):
        s = DiffusionSchedule.linear()
        with pytest.raises(StepOutOfRange):
            forward_noise(np.zeros((2, 3)), 5, np.zeros((2, 3)), s)


class TestForwardNoise:
    def test_no_noise_coefficient(self, rng):
        s = DiffusionSchedule(np.array([1e-15]))
        x = rng.normal(size=(4, 3))
        np.testing.assert_allclose(forward_noise(x, 0, rng.normal(size=(4, 3)), s), x, atol=1e-7)

    def test_zero_noise_scales(self, rng):
        s = DiffusionSchedule.linear()
        x = rng.normal(size=(4, 3))
        assert np.array_equal(forward_noise(x, 3, np.zeros((4, 3)), s), np.sqrt(s.alpha_bar[3]) * x)

    def test_superposition(self, rng):
        s = DiffusionSchedule.linear()
        x1, x2, e1, e2 = (rng.normal(size=(5, 3)) for _ in range(4))
        lhs = forward_noise(x1 + 2 * x2, 2, e1 - e2, s)
        rhs = forward_noise(x1, 2, e1, s) + forward_noise(2 * x2, 2, -e2, s)
        np.testing.assert_allclose(lhs, rhs, atol=1e-9)

    def test_monte_carlo_moments(self):
        s = DiffusionSchedule.linear()
        rng = np.random.default_rng(99)
        x0 = np.array([[0.3, -0.2, 0.1]])
        t = 3
        n = 100_000
        z = forward_noise(np.repeat(x0, n, 0), t, rng.standard_normal((n, 3)), s)
        var = 1 - s.alpha_bar[t]
        se_mean = np.sqrt(var / n)
        se_var = var * np.sqrt(2.0 / (n - 1))
        assert np.all(np.abs(z.mean(0) - np.sqrt(s.alpha_bar[t]) * x0[0]) < 3 * se_mean)
        assert np.all(np.abs(z.var(0, ddof=1) - var) < 3 * se_var)

    def test_shape_mismatch(self):
        with pytest.raises(ShapeMismatch):
            forward_noise(np.zeros((2, 3)), 0, np.zeros((3, 3)), DiffusionSchedule.linear())


class TestLoss:
    def _setup(self, rng, H=3, W=3, cond_dim=4):
        values = rng.normal(size=(H, W, 3))
        valid = rng.random((H, W)) > 0.25
        valid[0, 0] = True
        res = Residual(np.where(valid[..., None], values, 0.0), valid)
        return res, rng.normal(size=(H, W, cond_dim)), rng.normal(size=(H, W, 3))

    def test_zero_denoiser_is_noise_power(self, rng):
        s = DiffusionSchedule.linear()
        res, cond, noise = self._setup(rng)
        params = DenoiserParams.init(4, 8, rng)  # output layer starts at zero
        loss, _ = diffusion_loss(params, res, cond, 2, noise, s)
        assert loss == pytest.approx(np.mean(noise[res.valid] ** 2), rel=1e-12)

    def test_gradient(self, rng):
        s = DiffusionSchedule.linear()
        for _ in range(20):
            res, cond, noise = self._setup(rng)
            params = DenoiserParams.init(4, 6, rng)
            params.w3[:] = rng.normal(scale=0.5, size=params.w3.shape)
            params.b3[:] = rng.normal(scale=0.5, size=3)
            t = int(rng.integers(0, 5))
            _, g = diffusion_loss(params, res, cond, t, noise, s)
            for name, arr in params.arrays().items():
                num = numerical_gradient(lambda: diffusion_loss(params, res, cond, t, noise, s)[0], arr)
                assert relative_error(g[name], num) < 1e-4, name

    def test_alignment(self, rng):
        res, cond, noise = self._setup(rng)
        with pytest.raises(ShapeMismatch):
            diffusion_loss(DenoiserParams.init(4, 6, rng), res, cond[:2], 0, noise, DiffusionSchedule.linear())

    def test_oracle_denoiser_zero_loss(self, rng):
        s = DiffusionSchedule.linear()
        x0 = rng.normal(size=(10, 3))
        noise = rng.normal(size=(10, 3))
        for t in range(5):
            z = forward_noise(x0, t, noise, s)
            np.testing.assert_allclose(OracleDenoiser(x0, s).predict_noise(z, t), noise, atol=1e-10)


class TestRefine:
    def test_oracle_closed_loop(self):
        s = DiffusionSchedule.linear()
        rng = np.random.default_rng(5)
        for k in range(20):
            coarse, feats = coarse_and_features(rng)
            delta = rng.normal(scale=0.1, size=coarse.points.shape)
            oracle = OracleDenoiser(delta.reshape(-1, 3), s)
            out = refine(coarse, feats, oracle, s, seed=k)
            got = (out.points - coarse.points)[coarse.valid]
            mse = np.mean((got - delta[coarse.valid]) ** 2)
            assert mse <= 1e-3 * np.var(delta[coarse.valid])

    def test_invalid_pixels_untouched(self, rng):
        coarse, feats = coarse_and_features(rng)
        params = DenoiserParams.init(3 + 4, 8, rng)
        out = refine(coarse, feats, params, DiffusionSchedule.linear(), seed=1)
        assert np.array_equal(out.points[~coarse.valid], coarse.points[~coarse.valid])
        assert np.array_equal(out.valid, coarse.valid)

    def test_deterministic(self, rng):
        coarse, feats = coarse_and_features(rng)
        params = DenoiserParams.init(3 + 4, 8, rng)
        a = refine(coarse, feats, params, DiffusionSchedule.linear(), seed=11)
        b = refine(coarse, feats, params, DiffusionSchedule.linear(), seed=11)
        assert np.array_equal(a.points, b.points)

    def test_single_step_zero_denoiser_closed_form(self, rng):
        s = DiffusionSchedule.linear(1)
        coarse, feats = coarse_and_features(rng)
        out = refine(coarse, feats, ZeroDenoiser(), s, seed=42, residual_scale=0.5)
        draws = np.random.Generator(np.random.Philox(key=42)).standard_normal((36, 3)).reshape(6, 6, 3)
        expect = coarse.points + 0.5 * draws / np.sqrt(1 - s.beta[0])
        np.testing.assert_allclose(out.points[coarse.valid], expect[coarse.valid], atol=1e-14)

    def test_posterior_variance_final_step_is_zero(self):
        s = DiffusionSchedule.linear()
        assert s.posterior_variance(0) == 0.0
        ab = s.alpha_bar
        assert s.posterior_variance(2) == pytest.approx(s.beta[2] * (1 - ab[1]) / (1 - ab[2]), rel=1e-15)

    def test_condition_layout(self, rng):
        coarse, feats = coarse_and_features(rng)
        c = build_condition(coarse, feats)
        assert c.shape == (6, 6, 7)
        np.testing.assert_array_equal(c[..., :3], coarse.points)

    def test_reverse_sample_shape(self, rng):
        s = DiffusionSchedule.linear()
        z = reverse_sample(ZeroDenoiser(), np.zeros((7, 2)), s, rng, 7)
        assert z.shape == (7, 3)
