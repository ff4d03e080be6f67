"""Tests for reverse steps, self-recurrence and the guided sampling loop."""

import io
import json

import numpy as np
import pytest

from universal_guidance.errors import InvalidRangeError, NonFiniteError
from universal_guidance.guidance import (
    CallableFeatureMap,
    CallableLoss,
    GuidanceSpec,
    StrengthSchedule,
    make_linear_inverse,
)
from universal_guidance.models import AnalyticDenoiser, GaussianMixture
from universal_guidance.sampler import (
    ChainStreams,
    SamplerConfig,
    UniversalGuidanceSampler,
    chain_rng,
    ddim_step,
    ddpm_posterior,
    ddpm_step,
    self_recur,
    universal_guidance_sample,
    unguided_sample,
)
from universal_guidance.schedule import NoiseSchedule, forward_diffuse


class TestSamplerConfig:
    def test_aliases(self):
        assert SamplerConfig(kind="DDPM-ancestral").kind == "ddpm"
        assert SamplerConfig(kind="ddim-deterministic").kind == "ddim"

    @pytest.mark.parametrize(
        "kwargs",
        [{"kind": "euler"}, {"recurrence_k": 0}, {"recurrence_k": 1.5}, {"T": 0}, {"eta": 1.5}],
    )
    def test_invalid(self, kwargs):
        with pytest.raises(InvalidRangeError):
            SamplerConfig(**kwargs)

    def test_to_dict(self):
        data = SamplerConfig(recurrence_k=4, seed=9).to_dict()
        assert data["recurrence_k"] == 4
        assert data["seed"] == 9


class TestSteps:
    def test_ddim_with_true_noise(self, schedule, rng):
        z0 = rng.standard_normal((5, 2))
        eps = rng.standard_normal((5, 2))
        t = 30
        z_t = forward_diffuse(z0, t, eps, schedule)
        z_prev = ddim_step(z_t, eps, t, schedule)
        assert np.allclose(z_prev, forward_diffuse(z0, t - 1, eps, schedule))

    def test_ddim_last_step_returns_prediction(self, schedule, rng):
        z0 = rng.standard_normal(2)
        eps = rng.standard_normal(2)
        z_1 = forward_diffuse(z0, 1, eps, schedule)
        assert np.allclose(ddim_step(z_1, eps, 1, schedule), z0)

    def test_ddim_eta_one_equals_ddpm(self, schedule, rng):
        z_t = rng.standard_normal((6, 2))
        eps = rng.standard_normal((6, 2))
        xi = rng.standard_normal((6, 2))
        for t in (2, 40, 100):
            a = ddim_step(z_t, eps, t, schedule, eta=1.0, noise=xi)
            b = ddpm_step(z_t, eps, t, schedule, noise=xi)
            assert np.allclose(a, b, rtol=1e-10, atol=1e-12)

    def test_ddpm_first_step_is_deterministic(self, schedule):
        coef_z0, coef_zt, sigma = ddpm_posterior(1, schedule)
        assert sigma == 0.0
        assert coef_z0 == pytest.approx(1.0)
        assert coef_zt == pytest.approx(0.0)
        out = ddpm_step(np.array([0.2, 0.1]), np.array([0.0, 0.0]), 1, schedule)
        assert np.allclose(out, np.array([0.2, 0.1]) / np.sqrt(schedule.alpha(1)))

    def test_stochastic_step_needs_noise(self, schedule):
        with pytest.raises(InvalidRangeError):
            ddpm_step(np.zeros(2), np.zeros(2), 10, schedule)

    def test_self_recur_formula(self, schedule):
        z_prev = np.array([1.0, -1.0])
        noise = np.array([0.5, 0.5])
        ratio = schedule.alpha(20) / schedule.alpha(19)
        expected = np.sqrt(ratio) * z_prev + np.sqrt(1 - ratio) * noise
        assert np.allclose(self_recur(z_prev, 20, schedule, noise=noise), expected)

    def test_self_recur_preserves_forward_marginal(self, schedule, rng):
        z0 = np.array([2.0, 0.0])
        n = 100_000
        t = 50
        eps = rng.standard_normal((n, 2))
        z_prev = forward_diffuse(np.broadcast_to(z0, (n, 2)), t - 1, eps, schedule)
        z_t = self_recur(z_prev, t, schedule, rng=rng)
        alpha = schedule.alpha(t)
        tolerance = 5 * np.sqrt(1 - alpha) / np.sqrt(n)
        assert np.allclose(z_t.mean(axis=0), np.sqrt(alpha) * z0, atol=tolerance)
        assert np.allclose(z_t.var(axis=0), 1 - alpha, rtol=0.05)

    def test_ddpm_step_variance(self, schedule, rng):
        n = 200_000
        t = 50
        z_t = np.broadcast_to(np.array([0.4, -1.0]), (n, 2))
        eps = np.broadcast_to(np.array([0.1, 0.3]), (n, 2))
        out = ddpm_step(z_t, eps, t, schedule, rng=rng)
        _, _, sigma = ddpm_posterior(t, schedule)
        assert np.allclose(out.var(axis=0), sigma**2, rtol=0.03)

    def test_self_recur_at_first_step_is_forward_diffusion(self, schedule, rng):
        # alpha_0 = 1, so re-noising the final output to scale 1 is q(z_1 | z_0)
        z0 = rng.standard_normal((5, 2))
        noise = rng.standard_normal((5, 2))
        assert np.allclose(
            self_recur(z0, 1, schedule, noise=noise), forward_diffuse(z0, 1, noise, schedule)
        )

    def test_flat_schedule_step(self):
        schedule = NoiseSchedule([0.75, 0.75], strict=False)
        assert schedule.ratio(2) == 1.0
        z = np.array([0.4, 0.4])
        assert np.allclose(self_recur(z, 2, schedule, noise=np.ones(2)), z)


class TestChainStreams:
    def test_chain_rng_matches_seed_sequence(self):
        a = chain_rng(5, 3).standard_normal(4)
        b = np.random.default_rng(np.random.SeedSequence(5, spawn_key=(3,))).standard_normal(4)
        assert np.array_equal(a, b)

    def test_offset_streams(self):
        wide = ChainStreams(1, 3).standard_normal(2)
        narrow = ChainStreams(1, 1, first_chain=2).standard_normal(2)
        assert np.array_equal(wide[2], narrow[0])


class TestUniversalGuidanceSampler:
    def test_unguided_ddim_matches_single_gaussian(self, schedule):
        mu = np.array([1.0, -2.0])
        sigma = np.array([[0.7, 0.2], [0.2, 0.4]])
        gmm = GaussianMixture(weights=[1.0], means=[mu], covariances=[sigma])
        n = 2000
        samples = unguided_sample(
            SamplerConfig(seed=5), schedule, AnalyticDenoiser(gmm, schedule), n_chains=n
        )
        diag = np.diag(sigma)
        assert np.all(np.abs(samples.mean(axis=0) - mu) < 5 * np.sqrt(diag / n))
        cov_se = np.sqrt((np.outer(diag, diag) + sigma**2) / n)
        assert np.all(np.abs(np.cov(samples, rowvar=False) - sigma) < 5 * cov_se)

    def test_counts(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        config = SamplerConfig(recurrence_k=3, seed=1)
        result = universal_guidance_sample(config, short_schedule, denoiser, [], n_chains=4)
        assert result.samples.shape == (4, 2)
        assert result.denoiser_calls == 3 * short_schedule.T
        assert result.recurrence_draws == 2 * short_schedule.T

    def test_deterministic(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        spec = GuidanceSpec.from_entry(
            make_linear_inverse([[1.0, 0.0]], [1.0]), w=1.0, backward_steps=2
        )
        config = SamplerConfig(kind="ddpm", recurrence_k=2, seed=7)
        a = universal_guidance_sample(config, short_schedule, denoiser, [spec], n_chains=5)
        b = universal_guidance_sample(config, short_schedule, denoiser, [spec], n_chains=5)
        assert np.array_equal(a.samples, b.samples)
        assert np.array_equal(a.losses, b.losses)

    def test_chain_independent_of_batch(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        config = SamplerConfig(kind="ddpm", recurrence_k=2, seed=3)
        sampler = UniversalGuidanceSampler(config, short_schedule, denoiser, [])
        batch = sampler.sample(n_chains=4).samples
        alone = sampler.sample(n_chains=1, first_chain=2).samples
        assert np.allclose(batch[2], alone[0], rtol=1e-12, atol=1e-12)

    def test_noop_spec_matches_unguided(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        config = SamplerConfig(seed=2)
        spec = GuidanceSpec.from_entry(
            make_linear_inverse([[1.0, 0.0]], [0.0]), w=0.0, backward_steps=0
        )
        guided = universal_guidance_sample(config, short_schedule, denoiser, [spec], n_chains=6)
        guided = guided.samples
        plain = unguided_sample(config, short_schedule, denoiser, n_chains=6)
        assert np.allclose(guided, plain)

    def test_guidance_reduces_residual(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        spec = GuidanceSpec.from_entry(
            make_linear_inverse([[0.0, 1.0]], [1.0]), w=1.0, backward_steps=5
        )
        config = SamplerConfig(seed=4)
        guided = universal_guidance_sample(config, short_schedule, denoiser, [spec], n_chains=50)
        plain = universal_guidance_sample(config, short_schedule, denoiser, [], n_chains=50)
        guided_res = np.abs(guided.samples[:, 1] - 1.0)
        plain_res = np.abs(plain.samples[:, 1] - 1.0)
        assert np.median(guided_res) < np.median(plain_res)
        assert guided.losses.shape == (50, 1)

    def test_trajectory(self, world, short_schedule, tmp_path):
        denoiser = AnalyticDenoiser(world, short_schedule)
        spec = GuidanceSpec.from_entry(
            make_linear_inverse([[1.0, 0.0]], [0.5]), w=1.0, backward_steps=1
        )
        config = SamplerConfig(recurrence_k=2, seed=0, record_trajectory=True)
        result = universal_guidance_sample(config, short_schedule, denoiser, [spec], n_chains=3)
        assert len(result.trajectory) == 2 * short_schedule.T
        first = result.trajectory.records[0]
        assert first.t == short_schedule.T and first.n == 1
        path = result.trajectory.write_jsonl(tmp_path / "trajectory.jsonl")
        lines = path.read_text().splitlines()
        assert len(lines) == 3 * 2 * short_schedule.T
        row = json.loads(lines[0])
        assert set(row) == {
            "chain", "t", "n", "z_t", "eps_before", "eps_after", "z0_hat", "delta_z0", "losses"
        }

    def test_trajectory_stream(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        stream = io.StringIO()
        sampler = UniversalGuidanceSampler(SamplerConfig(seed=0), short_schedule, denoiser, [])
        result = sampler.sample(n_chains=2, first_chain=5, trajectory_stream=stream)
        assert result.trajectory is None
        rows = [json.loads(line) for line in stream.getvalue().splitlines()]
        assert len(rows) == 2 * short_schedule.T
        assert {row["chain"] for row in rows} == {5, 6}

    def test_non_finite_abort_has_context(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        bad = GuidanceSpec(
            feature=CallableFeatureMap(lambda x: x, lambda x, v: v),
            loss=CallableLoss(
                lambda c, y: np.full(y.shape[0], np.inf), lambda c, y: np.zeros_like(y)
            ),
            prompt=None,
            strength=StrengthSchedule(1.0),
            backward_steps=0,
        )
        with pytest.raises(NonFiniteError) as info:
            universal_guidance_sample(SamplerConfig(), short_schedule, denoiser, [bad], n_chains=2)
        err = info.value
        assert err.t == short_schedule.T
        assert err.recurrence == 1
        assert err.spec_index == 0
        assert err.chain == 0
        assert "t=20" in str(err)

    def test_non_finite_abort_names_offending_chain(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        # only the third chain of the batch produces an infinite loss
        mask = np.array([False, False, True])
        bad = GuidanceSpec(
            feature=CallableFeatureMap(lambda x: x, lambda x, v: v),
            loss=CallableLoss(
                lambda c, y: np.where(mask, np.inf, 0.0), lambda c, y: np.zeros_like(y)
            ),
            prompt=None,
            strength=StrengthSchedule(1.0),
            backward_steps=0,
        )
        sampler = UniversalGuidanceSampler(SamplerConfig(seed=0), short_schedule, denoiser, [bad])
        with pytest.raises(NonFiniteError) as info:
            sampler.sample(n_chains=3, first_chain=4)
        assert info.value.chain == 6
        assert "chain=6" in str(info.value)

    def test_schedule_mismatch(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        with pytest.raises(InvalidRangeError):
            UniversalGuidanceSampler(SamplerConfig(T=50), short_schedule, denoiser)

    def test_needs_chains(self, world, short_schedule):
        denoiser = AnalyticDenoiser(world, short_schedule)
        sampler = UniversalGuidanceSampler(SamplerConfig(), short_schedule, denoiser)
        with pytest.raises(InvalidRangeError):
            sampler.sample(n_chains=0)
