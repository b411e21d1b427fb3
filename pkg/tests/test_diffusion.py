import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from gendds.codec import IdentityCodec
from gendds.diffusion import (ConditioningBundle, NoiseSchedule, SamplerConfig, cfg_combine, ddim_timesteps,
                              diffusion_loss, gaussian_optimal_eps, karras_sigmas, q_sample, q_sample_at,
                              run_sampler, sample)
from gendds.errors import ConfigurationError, ContractError
from gendds.tensor import Tensor
from gendds.text import ConditioningMatrix
from gendds.unet import UNet, UNetConfig

SCHEDULE = NoiseSchedule()


def oracle_eps(s):
    """Optimal noise predictor for N(0, s^2) data, written out independently."""
    ab = np.cumprod(1.0 - np.linspace(1e-4, 0.02, 1000))

    def eps(x, t):
        t = np.asarray(t)
        if np.issubdtype(t.dtype, np.integer):
            a = ab[t]
        else:
            log_sig = np.log(np.sqrt((1 - ab) / ab))
            sig = np.exp(np.interp(t, np.arange(1000), log_sig))
            a = 1 / (1 + sig**2)
        a = a.reshape(-1, *([1] * (x.ndim - 1)))
        return np.sqrt(1 - a) / (a * s * s + 1 - a) * x

    return eps


class TestSchedule:
    def test_monotone_tables(self):
        assert np.all(np.diff(SCHEDULE.betas) > 0)
        assert np.all(np.diff(SCHEDULE.alpha_bars) < 0)
        assert np.all(np.diff(SCHEDULE.sigmas) > 0)
        assert 0.9998 < SCHEDULE.alpha_bars[0] < 1

    def test_endpoints(self):
        assert SCHEDULE.betas[0] == 1e-4 and SCHEDULE.betas[-1] == pytest.approx(0.02)
        assert SCHEDULE.sigma_min == SCHEDULE.sigmas[1]
        assert SCHEDULE.sigma_max == SCHEDULE.sigmas[999]

    def test_sigma_t_roundtrip(self):
        t = np.array([1.0, 17.5, 400.25, 998.0])
        np.testing.assert_allclose(SCHEDULE.sigma_to_t(SCHEDULE.t_to_sigma(t)), t, atol=1e-9)

    def test_bad_schedule(self):
        with pytest.raises(ConfigurationError):
            NoiseSchedule(10, 0.02, 0.01)


class TestQSample:
    def test_boundaries(self):
        x0, eps = np.full(3, 2.0), np.full(3, -1.0)
        np.testing.assert_array_equal(q_sample_at(x0, 1.0, eps), x0)
        np.testing.assert_array_equal(q_sample_at(x0, 0.0, eps), eps)

    def test_closed_form(self):
        x0, eps = np.array([[1.0, 2.0]]), np.array([[0.5, -0.5]])
        ab = np.prod(1 - np.linspace(1e-4, 0.02, 1000)[:301])
        np.testing.assert_allclose(q_sample(x0, [300], eps, SCHEDULE), np.sqrt(ab) * x0 + np.sqrt(1 - ab) * eps)

    def test_out_of_range(self):
        with pytest.raises(ContractError):
            q_sample(np.zeros((1, 2)), [1000], np.zeros((1, 2)), SCHEDULE)

    @pytest.mark.parametrize("t", [10, 300, 900])
    def test_monte_carlo_variance(self, t):
        rng = np.random.default_rng(t)
        n = 100_000
        x0 = rng.normal(scale=0.7, size=(n, 1))
        xt = q_sample(x0, np.full(n, t), rng.standard_normal((n, 1)), SCHEDULE)
        ab = SCHEDULE.alpha_bars[t]
        assert np.var(xt) == pytest.approx(ab * np.var(x0) + 1 - ab, rel=0.05)


class TestLoss:
    def setup_method(self):
        rng = np.random.default_rng(0)
        self.x0 = rng.normal(size=(4, 2, 3, 3))
        self.eps = rng.normal(size=self.x0.shape)
        self.t = np.array([0, 10, 500, 999])

    def test_exact_oracle_gives_zero(self):
        loss = diffusion_loss(self.x0, self.t, self.eps, lambda z, t, c: Tensor(self.eps), None, SCHEDULE)
        assert loss.item() == 0.0

    def test_offset_by_one_gives_one(self):
        loss = diffusion_loss(self.x0, self.t, self.eps, lambda z, t, c: Tensor(self.eps + 1.0), None, SCHEDULE)
        assert abs(loss.item() - 1.0) < 1e-7

    def test_timestep_batch_mismatch(self):
        with pytest.raises(ContractError):
            diffusion_loss(self.x0, self.t[:2], self.eps, lambda z, t, c: Tensor(z), None, SCHEDULE)

    def test_gradient_matches_finite_differences(self):
        net = UNet(UNetConfig.tiny(), np.random.default_rng(0), dtype=np.float64)
        rng = np.random.default_rng(1)
        x0, eps = rng.normal(size=(2, 4, 8, 8)), rng.normal(size=(2, 4, 8, 8))
        cond = ConditioningMatrix(Tensor(rng.normal(size=(2, 2, 8))), np.ones((2, 2), bool))
        t = np.array([20, 700])
        net.zero_grad()
        diffusion_loss(x0, t, eps, net, cond, SCHEDULE).backward()
        w = net.out_conv.weight
        idx = (1, 3, 0, 2)
        analytic = w.grad[idx]
        h, orig = 1e-5, w.data[idx]
        w.data[idx] = orig + h
        up = diffusion_loss(x0, t, eps, net, cond, SCHEDULE).item()
        w.data[idx] = orig - h
        down = diffusion_loss(x0, t, eps, net, cond, SCHEDULE).item()
        w.data[idx] = orig
        assert analytic == pytest.approx((up - down) / (2 * h), rel=1e-5)


class TestGuidance:
    def test_scale_one_is_conditional(self):
        rng = np.random.default_rng(0)
        u, c = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_array_equal(cfg_combine(u, c, 1.0), c)

    def test_scale_zero_is_unconditional(self):
        rng = np.random.default_rng(0)
        u, c = rng.normal(size=5), rng.normal(size=5)
        np.testing.assert_array_equal(cfg_combine(u, c, 0.0), u)

    def test_default_scale_arithmetic(self):
        assert cfg_combine(np.zeros(1), np.ones(1), 7.5)[0] == 7.5

    @given(st.floats(0, 50), st.integers(0, 1000))
    def test_identical_branches_ignore_scale(self, w, seed):
        e = np.random.default_rng(seed).normal(size=6)
        np.testing.assert_array_equal(cfg_combine(e, e.copy(), w), e)

    def test_shape_mismatch(self):
        with pytest.raises(ContractError):
            cfg_combine(np.zeros(2), np.zeros(3), 2.0)


class TestKarras:
    def test_linear_case_by_hand(self):
        np.testing.assert_allclose(karras_sigmas(3, 1.0, 4.0, 1.0), [4.0, 2.5, 1.0, 0.0])

    @settings(max_examples=60)
    @given(st.integers(2, 200), st.floats(1e-3, 1.0), st.floats(1.5, 200.0), st.floats(0.5, 12.0))
    def test_endpoints_and_monotone(self, n, lo, hi, rho):
        s = karras_sigmas(n, lo, hi, rho)
        assert len(s) == n + 1 and s[-1] == 0
        assert s[0] == hi and s[n - 1] == lo
        assert np.all(np.diff(s) < 0)

    def test_too_few_steps(self):
        with pytest.raises(ConfigurationError):
            karras_sigmas(1, 0.1, 10)


class TestSamplerConfig:
    @pytest.mark.parametrize("kw", [{"kind": "euler"}, {"steps": 0}, {"cfg_scale": -1},
                                    {"sigma_min": 2.0, "sigma_max": 1.0}])
    def test_invalid(self, kw):
        with pytest.raises(ConfigurationError):
            SamplerConfig(**kw)

    def test_defaults(self):
        c = SamplerConfig()
        assert (c.kind, c.steps, c.cfg_scale, c.rho) == ("dpmpp_2m", 32, 7.5, 7.0)

    def test_timesteps_descend(self):
        ts = ddim_timesteps(SCHEDULE, 32)
        assert ts[0] == 999 and ts[-1] == 0 and np.all(np.diff(ts) < 0)


S = 0.5


def draw(kind, steps, n=10_000, seed=0, eta=0.0):
    cfg = SamplerConfig(kind=kind, steps=steps, seed=seed, eta=eta)
    return run_sampler(oracle_eps(S), (n, 1), SCHEDULE, cfg)


class TestGaussianOracle:
    def test_library_oracle_matches_independent_one(self):
        x = np.random.default_rng(0).normal(size=(3, 2))
        for t in (np.array([0, 500, 999]), np.array([0.5, 250.3, 998.9])):
            np.testing.assert_allclose(gaussian_optimal_eps(SCHEDULE, S)(x, t), oracle_eps(S)(x, t), rtol=1e-12)

    def test_ddim_recovers_target(self):
        x = draw("ddim", 64)
        assert abs(x.mean()) < 0.05
        assert x.var() == pytest.approx(S * S, rel=0.10)

    def test_dpmpp_agrees_with_long_ddim(self):
        a, b = draw("dpmpp_2m", 64), draw("ddim", 512, seed=1)
        assert abs(a.mean() - b.mean()) < 0.05
        assert a.var() == pytest.approx(b.var(), rel=0.05)

    def test_ddpm_agrees_with_stochastic_ddim(self):
        a, b = draw("ddpm", 64), draw("ddim", 64, seed=1, eta=1.0)
        assert a.var() == pytest.approx(b.var(), rel=0.10)
        assert abs(a.mean() - b.mean()) < 0.05

    def test_refinement_converges(self):
        diffs = [np.mean(np.abs(draw("ddim", n, 2000) - draw("ddim", 2 * n, 2000))) for n in (8, 16, 32, 64)]
        assert all(b < a for a, b in zip(diffs, diffs[1:]))

    @pytest.mark.parametrize("kind", ["ddim", "ddpm", "dpmpp_2m"])
    def test_seeded_determinism(self, kind):
        np.testing.assert_array_equal(draw(kind, 16, 50, seed=3), draw(kind, 16, 50, seed=3))


class _Echo:
    """Denoiser stub whose prediction depends on the conditioning rows."""

    dtype = np.float64

    def predict(self, x, t, cond, depth):
        return x * 0.1 + cond.matrix.data[:, :1, :1][:, :, :, None]


def test_sample_scale_irrelevant_for_identical_branches():
    cond = ConditioningMatrix(Tensor(np.full((2, 1, 1), 0.3)), np.ones((2, 1), bool))
    bundle = ConditioningBundle(cond, cond)
    outs = [sample(_Echo(), IdentityCodec(), bundle, SamplerConfig(kind="ddim", steps=8, cfg_scale=w), (2, 3, 4, 4))
            for w in (0.0, 1.0, 7.5)]
    np.testing.assert_array_equal(outs[0], outs[1])
    np.testing.assert_array_equal(outs[0], outs[2])


def test_sample_batch_mismatch():
    cond = ConditioningMatrix(Tensor(np.zeros((1, 1, 1))), np.ones((1, 1), bool))
    with pytest.raises(ContractError):
        sample(_Echo(), IdentityCodec(), ConditioningBundle(cond, cond), SamplerConfig(), (2, 3, 4, 4))
