"""Tests for the mixture world, the analytic denoiser and the noisy classifier."""

import numpy as np
import pytest
from scipy.stats import multivariate_normal

from universal_guidance.errors import (
    DegenerateScheduleError,
    DimensionMismatchError,
    InvalidRangeError,
)
from universal_guidance.models import (
    GaussianMixture,
    NoisyComponentClassifier,
    PerturbedDenoiser,
    analytic_denoiser,
    component_log_responsibilities,
    gmm_log_density,
    gmm_posterior_mean,
    gmm_sample,
    predict_z0,
)
from universal_guidance.schedule import NoiseSchedule, forward_diffuse, true_noise_from

from .finite_diff import central_difference, central_jacobian


class TestGaussianMixture:
    def test_diagonal_expansion(self, world):
        assert world.diagonal
        assert world.covariances.shape == (2, 2, 2)
        assert np.allclose(world.covariances[0], 0.25 * np.eye(2))

    def test_weights_must_sum_to_one(self):
        with pytest.raises(InvalidRangeError):
            GaussianMixture(weights=[0.5, 0.6], means=[[0.0], [1.0]], covariances=[[1.0], [1.0]])

    def test_weight_count(self):
        with pytest.raises(DimensionMismatchError):
            GaussianMixture(weights=[1.0], means=[[0.0], [1.0]], covariances=[[1.0], [1.0]])

    def test_not_positive_definite(self):
        with pytest.raises(InvalidRangeError):
            GaussianMixture(
                weights=[1.0], means=[[0.0, 0.0]], covariances=[[[1.0, 2.0], [2.0, 1.0]]]
            )

    def test_not_symmetric(self):
        with pytest.raises(InvalidRangeError):
            GaussianMixture(
                weights=[1.0], means=[[0.0, 0.0]], covariances=[[[1.0, 0.1], [0.0, 1.0]]]
            )

    def test_dict_round_trip(self, full_cov_world):
        again = GaussianMixture.from_dict(full_cov_world.to_dict())
        assert np.array_equal(again.covariances, full_cov_world.covariances)
        assert again.K == 3 and again.dim == 2


class TestPosteriorMean:
    def test_single_gaussian_closed_form(self, schedule):
        mu = np.array([1.0, -2.0])
        sigma = np.array([[0.7, 0.2], [0.2, 0.4]])
        gmm = GaussianMixture(weights=[1.0], means=[mu], covariances=[sigma])
        t = 50
        alpha = schedule.alpha(t)
        z_t = np.array([0.3, 0.9])
        marginal = alpha * sigma + (1 - alpha) * np.eye(2)
        shifted = np.linalg.solve(marginal, z_t - np.sqrt(alpha) * mu)
        expected = mu + np.sqrt(alpha) * sigma @ shifted
        assert np.allclose(gmm_posterior_mean(z_t, t, gmm, schedule), expected, atol=1e-12)

    def test_batch_matches_single(self, full_cov_world, schedule, rng):
        z = rng.standard_normal((5, 2))
        batch = gmm_posterior_mean(z, 30, full_cov_world, schedule)
        for i in range(5):
            assert np.allclose(batch[i], gmm_posterior_mean(z[i], 30, full_cov_world, schedule))

    def test_diagonal_matches_full(self, world, schedule, rng):
        full = GaussianMixture(
            weights=world.weights, means=world.means, covariances=world.covariances
        )
        assert not full.diagonal
        z = rng.standard_normal((8, 2)) * 3
        assert np.allclose(
            gmm_posterior_mean(z, 70, world, schedule), gmm_posterior_mean(z, 70, full, schedule)
        )

    def test_far_point_stays_finite(self, world, schedule):
        z = np.array([[1e3, -1e3]])
        assert np.all(np.isfinite(gmm_posterior_mean(z, 5, world, schedule)))

    def test_dimension_mismatch(self, world, schedule):
        with pytest.raises(DimensionMismatchError):
            gmm_posterior_mean(np.zeros(3), 10, world, schedule)


class TestAnalyticDenoiser:
    def test_eps_consistent_with_posterior_mean(self, full_cov_world, schedule, rng):
        z = rng.standard_normal((4, 2))
        t = 25
        alpha = schedule.alpha(t)
        out = analytic_denoiser(z, t, full_cov_world, schedule)
        mean = gmm_posterior_mean(z, t, full_cov_world, schedule)
        assert np.allclose(predict_z0(z, out.eps_hat, t, schedule), mean)
        assert out.jacobian is None
        assert np.allclose(out.eps_hat, (z - np.sqrt(alpha) * mean) / np.sqrt(1 - alpha))

    @pytest.mark.parametrize("t", [1, 10, 50, 100])
    def test_jacobian_matches_finite_differences(self, full_cov_world, schedule, rng, t):
        z = rng.standard_normal((20, 2)) * 2
        out = analytic_denoiser(z, t, full_cov_world, schedule, want_jacobian=True)
        numeric = central_jacobian(
            lambda x: analytic_denoiser(x, t, full_cov_world, schedule).eps_hat, z
        )
        assert np.allclose(out.jacobian, numeric, rtol=1e-4, atol=1e-5)

    def test_single_vector_shapes(self, denoiser):
        out = denoiser(np.array([0.5, 0.5]), 10, want_jacobian=True)
        assert out.eps_hat.shape == (2,)
        assert out.jacobian.shape == (2, 2)

    def test_degenerate_alpha(self, world):
        schedule = NoiseSchedule([1.0, 0.5])
        with pytest.raises(DegenerateScheduleError):
            analytic_denoiser(np.zeros(2), 1, world, schedule)

    def test_close_to_true_noise_for_point_mass(self, schedule):
        # a tiny-variance world makes the posterior mean the point itself
        gmm = GaussianMixture(weights=[1.0], means=[[1.0, 2.0]], covariances=[[1e-8, 1e-8]])
        eps = np.array([0.3, -0.7])
        z_t = forward_diffuse(np.array([1.0, 2.0]), 40, eps, schedule)
        out = analytic_denoiser(z_t, 40, gmm, schedule)
        expected = true_noise_from(z_t, np.array([1.0, 2.0]), 40, schedule)
        assert np.allclose(out.eps_hat, expected, atol=1e-6)


class TestPredictZ0:
    def test_round_trip(self, schedule, rng):
        z0 = rng.standard_normal((100, 2))
        eps = rng.standard_normal((100, 2))
        for t in (1, 50, 100):
            z_t = forward_diffuse(z0, t, eps, schedule)
            assert np.allclose(predict_z0(z_t, eps, t, schedule), z0, rtol=1e-10, atol=1e-10)

    def test_shape_mismatch(self, schedule):
        with pytest.raises(DimensionMismatchError):
            predict_z0(np.zeros(2), np.zeros(3), 10, schedule)


class TestPerturbedDenoiser:
    def test_zero_amplitude_is_base(self, denoiser, rng):
        z = rng.standard_normal((3, 2))
        wrapped = PerturbedDenoiser(denoiser, amplitude=0.0, seed=3)
        assert np.allclose(wrapped(z, 20).eps_hat, denoiser(z, 20).eps_hat)

    def test_jacobian(self, denoiser, rng):
        z = rng.standard_normal((6, 2))
        wrapped = PerturbedDenoiser(denoiser, amplitude=0.3, seed=7, frequency=0.5)
        out = wrapped(z, 33, want_jacobian=True)
        numeric = central_jacobian(lambda x: wrapped(x, 33).eps_hat, z)
        assert np.allclose(out.jacobian, numeric, rtol=1e-4, atol=1e-5)

    def test_bounded_and_reproducible(self, denoiser, rng):
        z = rng.standard_normal((6, 2))
        a = PerturbedDenoiser(denoiser, amplitude=0.2, seed=11)
        b = PerturbedDenoiser(denoiser, amplitude=0.2, seed=11)
        diff = a(z, 5).eps_hat - denoiser(z, 5).eps_hat
        assert np.all(np.abs(diff) <= 0.2 + 1e-12)
        assert np.array_equal(a(z, 5).eps_hat, b(z, 5).eps_hat)

    def test_negative_amplitude(self, denoiser):
        with pytest.raises(InvalidRangeError):
            PerturbedDenoiser(denoiser, amplitude=-1.0)


class TestNoisyClassifier:
    def test_probabilities_sum_to_one(self, full_cov_world, schedule, rng):
        clf = NoisyComponentClassifier(full_cov_world, schedule)
        probs = clf.probabilities(rng.standard_normal((10, 2)), 40)
        assert probs.shape == (10, 3)
        assert np.allclose(probs.sum(axis=1), 1.0)

    def test_log_prob_gradient(self, full_cov_world, schedule, rng):
        clf = NoisyComponentClassifier(full_cov_world, schedule)
        z = rng.standard_normal((15, 2))
        numeric = central_difference(lambda x: clf.log_probabilities(x, 60)[:, 1], z)
        assert np.allclose(clf.log_prob_gradient(z, 60, 1), numeric, rtol=1e-4, atol=1e-6)

    def test_probability_jacobian(self, full_cov_world, schedule, rng):
        clf = NoisyComponentClassifier(full_cov_world, schedule)
        z = rng.standard_normal((5, 2))
        numeric = central_jacobian(lambda x: clf.probabilities(x, 15), z)
        assert np.allclose(clf.probability_jacobian(z, 15), numeric, rtol=1e-4, atol=1e-6)

    def test_clean_level_matches_responsibilities(self, world, schedule, rng):
        clf = NoisyComponentClassifier(world, schedule)
        z = rng.standard_normal((4, 2))
        log_resp, _ = component_log_responsibilities(z, world)
        assert np.allclose(clf.log_probabilities(z, 0), log_resp)


class TestSamplingAndDensity:
    def test_sample_moments(self, world, rng):
        samples = gmm_sample(world, 50_000, rng)
        assert samples.shape == (50_000, 2)
        assert np.abs(samples[:, 0].mean()) < 0.1
        assert np.mean(samples[:, 0] < 0) == pytest.approx(0.5, abs=0.02)

    def test_sample_needs_positive_n(self, world, rng):
        with pytest.raises(InvalidRangeError):
            gmm_sample(world, 0, rng)

    def test_log_density_single_gaussian(self):
        sigma = [[2.0, 0.3], [0.3, 1.0]]
        gmm = GaussianMixture(weights=[1.0], means=[[1.0, 0.0]], covariances=[sigma])
        z = np.array([0.2, -0.4])
        expected = multivariate_normal([1.0, 0.0], sigma).logpdf(z)
        value = gmm_log_density(gmm, z)
        assert isinstance(value, float)
        assert value == pytest.approx(expected, rel=1e-12)

    def test_log_density_mixture(self, world):
        z = np.array([[3.0, 0.0], [0.0, 0.0]])
        expected = np.log(
            0.5 * multivariate_normal([-3, 0], 0.25 * np.eye(2)).pdf(z)
            + 0.5 * multivariate_normal([3, 0], 0.25 * np.eye(2)).pdf(z)
        )
        assert np.allclose(gmm_log_density(world, z), expected)

    def test_log_density_far_point_finite(self, world):
        assert np.isfinite(gmm_log_density(world, np.array([100.0, 100.0])))


class TestOptimality:
    def test_posterior_mean_beats_linear_predictor(self, world, schedule, rng):
        n = 10_000
        t = 50
        z0 = gmm_sample(world, n, rng)
        eps = rng.standard_normal((n, 2))
        z_t = forward_diffuse(z0, t, eps, schedule)
        posterior_mse = np.mean(np.sum((gmm_posterior_mean(z_t, t, world, schedule) - z0) ** 2, 1))
        design = np.column_stack([z_t, np.ones(n)])
        coef, *_ = np.linalg.lstsq(design, z0, rcond=None)
        linear_mse = np.mean(np.sum((design @ coef - z0) ** 2, axis=1))
        assert posterior_mse <= linear_mse

    def test_single_gaussian_posterior_mean_by_quadrature(self, schedule):
        mu, var = 0.5, 0.8
        gmm = GaussianMixture(weights=[1.0], means=[[mu]], covariances=[[var]])
        t = 30
        alpha = schedule.alpha(t)
        x = np.linspace(-10.0, 10.0, 40_001)
        for z in (-1.5, 0.2, 2.0):
            log_post = -0.5 * (x - mu) ** 2 / var
            log_post -= 0.5 * (z - np.sqrt(alpha) * x) ** 2 / (1 - alpha)
            weights = np.exp(log_post - log_post.max())
            expected = np.sum(x * weights) / np.sum(weights)
            value = gmm_posterior_mean(np.array([z]), t, gmm, schedule)[0]
            assert value == pytest.approx(expected, abs=1e-6)

    @pytest.mark.parametrize("fixture", ["world", "full_cov_world"])
    def test_log_density_integrates_to_one(self, fixture, request):
        gmm = request.getfixturevalue(fixture)
        step = 0.02
        axes = [np.arange(m.min() - 6.0, m.max() + 6.0, step) for m in gmm.means.T]
        grid = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 2)
        density = np.exp(gmm_log_density(gmm, grid))
        assert density.sum() * step**2 == pytest.approx(1.0, abs=1e-3)
        mean = (density[:, None] * grid).sum(axis=0) * step**2
        assert np.allclose(mean, gmm.weights @ gmm.means, atol=1e-3)
