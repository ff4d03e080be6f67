"""
Data distribution and denoisers.

The data world is a Gaussian mixture. Its exact posterior-mean denoiser
stands in for a pretrained noise-prediction network: for every (z_t, t) it
returns eps_hat = (z_t - sqrt(alpha_t) E[z0 | z_t]) / sqrt(1 - alpha_t)
together with the exact Jacobian d eps_hat / d z_t.

Example:
    gmm = default_world()
    schedule = build_linear_schedule(100)
    denoiser = AnalyticDenoiser(gmm, schedule)
    out = denoiser(z_t, t=50, want_jacobian=True)
"""

from abc import ABC, abstractmethod
from dataclasses import dataclass, field
from typing import Dict, Optional, Tuple
import logging

import numpy as np
from scipy.special import logsumexp
from scipy.stats import multivariate_normal

from ._array import as_batch, restore
from .errors import (
    DegenerateScheduleError,
    DimensionMismatchError,
    InvalidRangeError,
)
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

_LOG_2PI = np.log(2.0 * np.pi)


@dataclass(frozen=True)
class GaussianMixture:
    """
    Mixture of K Gaussians in d dimensions.

    covariances may be given as (K, d, d) full matrices or as (K, d)
    diagonals; diagonal mixtures take a cheaper inversion path.
    """
    weights: np.ndarray
    means: np.ndarray
    covariances: np.ndarray
    diagonal: bool = field(default=False, init=False)

    def __post_init__(self):
        weights = np.array(self.weights, dtype=float).reshape(-1)
        means = np.array(self.means, dtype=float)
        covs = np.array(self.covariances, dtype=float)
        if means.ndim == 1:
            means = means[:, None]
        K, d = means.shape
        if weights.shape != (K,):
            raise DimensionMismatchError(f"{weights.size} weights for {K} components")
        if np.any(weights < 0.0) or abs(weights.sum() - 1.0) > 1e-12:
            raise InvalidRangeError("mixture weights must be nonnegative and sum to 1")

        diagonal = covs.ndim == 2
        if diagonal:
            if covs.shape != (K, d):
                raise DimensionMismatchError(
                    f"diagonal covariances must be ({K}, {d}), got {covs.shape}"
                )
            if np.any(covs <= 1e-10):
                raise InvalidRangeError("covariance diagonals must exceed 1e-10")
            covs = np.einsum("ki,ij->kij", covs, np.eye(d))
        else:
            if covs.shape != (K, d, d):
                raise DimensionMismatchError(
                    f"covariances must be ({K}, {d}, {d}), got {covs.shape}"
                )
            if not np.allclose(covs, np.swapaxes(covs, 1, 2), atol=1e-12):
                raise InvalidRangeError("covariances must be symmetric")
            if np.any(np.linalg.eigvalsh(covs) <= 1e-10):
                raise InvalidRangeError("covariances must be positive definite")

        for arr in (weights, means, covs):
            arr.setflags(write=False)
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "covariances", covs)
        object.__setattr__(self, "diagonal", diagonal)

    @property
    def K(self) -> int:
        return int(self.weights.size)

    @property
    def dim(self) -> int:
        return int(self.means.shape[1])

    @classmethod
    def from_dict(cls, data: Dict) -> "GaussianMixture":
        """Create a mixture from a config/world dictionary"""
        return cls(
            weights=data["weights"],
            means=data["means"],
            covariances=data["covariances"],
        )

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {
            "weights": self.weights.tolist(),
            "means": self.means.tolist(),
            "covariances": self.covariances.tolist(),
        }


def default_world() -> GaussianMixture:
    """d=2, K=2, means (+-3, 0), covariance 0.25 I, equal weights."""
    return GaussianMixture(
        weights=[0.5, 0.5],
        means=[[-3.0, 0.0], [3.0, 0.0]],
        covariances=[[0.25, 0.25], [0.25, 0.25]],
    )


@dataclass
class DenoiserOutput:
    """Predicted noise eps_hat and, when requested, d eps_hat / d z_t."""
    eps_hat: np.ndarray
    jacobian: Optional[np.ndarray] = None


@dataclass
class _PosteriorTerms:
    mean: np.ndarray
    log_resp: np.ndarray
    grad_log_resp: Optional[np.ndarray]
    mean_jacobian: Optional[np.ndarray]


def _marginal_parameters(gmm: GaussianMixture, alpha: float) -> Tuple[np.ndarray, ...]:
    """Precision, log-determinant and conditioning gain of every noisy marginal."""
    d = gmm.dim
    if gmm.diagonal:
        sigma = np.diagonal(gmm.covariances, axis1=1, axis2=2)
        marginal = alpha * sigma + (1.0 - alpha)
        precision = np.einsum("ki,ij->kij", 1.0 / marginal, np.eye(d))
        logdet = np.log(marginal).sum(axis=1)
        gain = np.einsum("ki,ij->kij", np.sqrt(alpha) * sigma / marginal, np.eye(d))
        return precision, logdet, gain

    marginal = alpha * gmm.covariances + (1.0 - alpha) * np.eye(d)
    sign, logdet = np.linalg.slogdet(marginal)
    assert np.all(sign > 0), "noisy marginal covariance lost positive definiteness"
    precision = np.linalg.inv(marginal)
    gain = np.sqrt(alpha) * np.einsum("kij,kjl->kil", gmm.covariances, precision)
    return precision, logdet, gain


def _posterior_terms(
    zb: np.ndarray, alpha: float, gmm: GaussianMixture, with_gradients: bool
) -> _PosteriorTerms:
    if zb.shape[1] != gmm.dim:
        raise DimensionMismatchError(f"z has dimension {zb.shape[1]}, mixture has {gmm.dim}")
    precision, logdet, gain = _marginal_parameters(gmm, alpha)
    residual = zb[:, None, :] - np.sqrt(alpha) * gmm.means[None, :, :]
    scaled = np.einsum("kij,nkj->nki", precision, residual)
    maha = np.einsum("nki,nki->nk", residual, scaled)
    with np.errstate(divide="ignore"):
        log_weights = np.log(gmm.weights)
    log_joint = log_weights[None, :] - 0.5 * (maha + logdet[None, :] + gmm.dim * _LOG_2PI)
    log_resp = log_joint - logsumexp(log_joint, axis=1, keepdims=True)
    resp = np.exp(log_resp)

    component_means = gmm.means[None, :, :] + np.einsum("kij,nkj->nki", gain, residual)
    mean = np.einsum("nk,nki->ni", resp, component_means)
    if not with_gradients:
        return _PosteriorTerms(mean, log_resp, None, None)

    # grad_z log N_i = -P_i r_i; grad_z log w_i = g_i - sum_j w_j g_j
    grad_log_density = -scaled
    grad_log_resp = grad_log_density - np.einsum("nk,nki->ni", resp, grad_log_density)[:, None, :]
    grad_resp = resp[:, :, None] * grad_log_resp
    mean_jacobian = np.einsum("nk,kij->nij", resp, gain) + np.einsum(
        "nki,nkj->nij", component_means, grad_resp
    )
    return _PosteriorTerms(mean, log_resp, grad_log_resp, mean_jacobian)


def gmm_posterior_mean(z_t, t: int, gmm: GaussianMixture, schedule: NoiseSchedule) -> np.ndarray:
    """
    E[z0 | z_t] under the mixture prior.

    Args:
        z_t: Noisy point(s), shape (d,) or (n, d)
        t: Time index in [1, T]
        gmm: Data distribution
        schedule: Noise schedule

    Returns:
        Posterior mean with the same shape as z_t
    """
    schedule.check_index(t)
    zb, single = as_batch(z_t, "z_t")
    terms = _posterior_terms(zb, schedule.alpha(t), gmm, with_gradients=False)
    return restore(terms.mean, single)


def predict_z0(z_t, eps_hat, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Predicted clean point (z_t - sqrt(1 - alpha_t) eps_hat) / sqrt(alpha_t)."""
    schedule.check_index(t)
    alpha = schedule.alpha(t)
    if not 0.0 < alpha < 1.0:
        raise DegenerateScheduleError(f"predict_z0 needs alpha_t in (0, 1), got {alpha}")
    z = np.asarray(z_t, dtype=float)
    eps = np.asarray(eps_hat, dtype=float)
    if z.shape != eps.shape:
        raise DimensionMismatchError(f"z_t {z.shape} and eps_hat {eps.shape} differ")
    return (z - np.sqrt(1.0 - alpha) * eps) / np.sqrt(alpha)


def analytic_denoiser(
    z_t,
    t: int,
    gmm: GaussianMixture,
    schedule: NoiseSchedule,
    want_jacobian: bool = False,
) -> DenoiserOutput:
    """
    Exact noise prediction of the mixture and its Jacobian.

    Args:
        z_t: Noisy point(s), shape (d,) or (n, d)
        t: Time index in [1, T]
        gmm: Data distribution
        schedule: Noise schedule
        want_jacobian: Also return d eps_hat / d z_t

    Returns:
        DenoiserOutput

    Raises:
        DegenerateScheduleError: If alpha_t = 1
    """
    schedule.check_index(t)
    alpha = schedule.alpha(t)
    if alpha >= 1.0:
        raise DegenerateScheduleError(f"alpha_{t} = 1: the noise prediction is undefined")
    zb, single = as_batch(z_t, "z_t")
    terms = _posterior_terms(zb, alpha, gmm, with_gradients=want_jacobian)
    noise_scale = np.sqrt(1.0 - alpha)
    eps_hat = (zb - np.sqrt(alpha) * terms.mean) / noise_scale

    jacobian = None
    if want_jacobian:
        jacobian = (np.eye(gmm.dim)[None] - np.sqrt(alpha) * terms.mean_jacobian) / noise_scale
        jacobian = restore(jacobian, single)
    return DenoiserOutput(eps_hat=restore(eps_hat, single), jacobian=jacobian)


class Denoiser(ABC):
    """Contract for a noise-prediction model eps_theta(z_t, t)."""

    @property
    @abstractmethod
    def dim(self) -> int:
        """Data dimension d."""

    @abstractmethod
    def predict(self, z_t, t: int, want_jacobian: bool = False) -> DenoiserOutput:
        """Predict the noise in z_t (and optionally its Jacobian)."""

    def __call__(self, z_t, t: int, want_jacobian: bool = False) -> DenoiserOutput:
        return self.predict(z_t, t, want_jacobian)


class AnalyticDenoiser(Denoiser):
    """Bayes-optimal denoiser of a Gaussian mixture."""

    def __init__(self, gmm: GaussianMixture, schedule: NoiseSchedule):
        """
        Initialize the analytic denoiser.

        Args:
            gmm: Data distribution
            schedule: Noise schedule shared with the sampler
        """
        self.gmm = gmm
        self.schedule = schedule

    @property
    def dim(self) -> int:
        return self.gmm.dim

    def predict(self, z_t, t: int, want_jacobian: bool = False) -> DenoiserOutput:
        return analytic_denoiser(z_t, t, self.gmm, self.schedule, want_jacobian)


class PerturbedDenoiser(Denoiser):
    """
    Wraps a denoiser and adds a fixed-seed smooth bounded error.

    eps_hat + amplitude * sin(B z + b_t), with B and the per-step phases b_t
    drawn once from the seed. The added term has an exact Jacobian, so
    forward guidance stays consistent.
    """

    def __init__(self, base: Denoiser, amplitude: float, seed: int = 0, frequency: float = 1.0):
        if amplitude < 0.0:
            raise InvalidRangeError(f"amplitude must be >= 0, got {amplitude}")
        self.base = base
        self.amplitude = float(amplitude)
        self.seed = int(seed)
        rng = np.random.default_rng(np.random.SeedSequence(self.seed))
        self.projection = frequency * rng.standard_normal((base.dim, base.dim))

    @property
    def dim(self) -> int:
        return self.base.dim

    def _phase(self, t: int) -> np.ndarray:
        rng = np.random.default_rng(np.random.SeedSequence(self.seed, spawn_key=(int(t),)))
        return rng.uniform(0.0, 2.0 * np.pi, self.dim)

    def predict(self, z_t, t: int, want_jacobian: bool = False) -> DenoiserOutput:
        out = self.base.predict(z_t, t, want_jacobian)
        zb, single = as_batch(z_t, "z_t")
        arg = zb @ self.projection.T + self._phase(t)[None, :]
        eps_hat = as_batch(out.eps_hat)[0] + self.amplitude * np.sin(arg)
        jacobian = None
        if want_jacobian:
            extra = self.amplitude * np.cos(arg)[:, :, None] * self.projection[None, :, :]
            jacobian = restore(as_batch_matrix(out.jacobian) + extra, single)
        return DenoiserOutput(eps_hat=restore(eps_hat, single), jacobian=jacobian)


def as_batch_matrix(jac: np.ndarray) -> np.ndarray:
    """Lift a (d, d) Jacobian to (1, d, d); leave (n, d, d) unchanged."""
    jac = np.asarray(jac, dtype=float)
    return jac[None] if jac.ndim == 2 else jac


class NoisyComponentClassifier:
    """
    Classifier over mixture components that accepts noisy inputs.

    p(c | z_t) is the exact component responsibility of the noisy marginal
    at level t, the desk-scale counterpart of a classifier trained on
    noisy data.
    """

    def __init__(self, gmm: GaussianMixture, schedule: NoiseSchedule):
        self.gmm = gmm
        self.schedule = schedule

    @property
    def num_classes(self) -> int:
        return self.gmm.K

    def _terms(self, z_t, t: int, with_gradients: bool) -> Tuple[_PosteriorTerms, bool]:
        self.schedule.check_index(t, allow_zero=True)
        zb, single = as_batch(z_t, "z_t")
        return _posterior_terms(zb, self.schedule.alpha(t), self.gmm, with_gradients), single

    def log_probabilities(self, z_t, t: int) -> np.ndarray:
        terms, single = self._terms(z_t, t, with_gradients=False)
        return restore(terms.log_resp, single)

    def probabilities(self, z_t, t: int) -> np.ndarray:
        return np.exp(self.log_probabilities(z_t, t))

    def log_prob_gradient(self, z_t, t: int, c: int) -> np.ndarray:
        """grad_{z_t} log p(c | z_t)."""
        terms, single = self._terms(z_t, t, with_gradients=True)
        return restore(terms.grad_log_resp[:, c, :], single)

    def probability_jacobian(self, z_t, t: int) -> np.ndarray:
        """d p(. | z_t) / d z_t with shape (K, d) or (n, K, d)."""
        terms, single = self._terms(z_t, t, with_gradients=True)
        resp = np.exp(terms.log_resp)
        return restore(resp[:, :, None] * terms.grad_log_resp, single)


def gmm_sample(gmm: GaussianMixture, n: int, rng: np.random.Generator) -> np.ndarray:
    """
    Draw n i.i.d. points from the mixture.

    Args:
        gmm: Mixture to sample
        n: Number of samples (>= 1)
        rng: numpy Generator

    Returns:
        Array of shape (n, d)
    """
    if n < 1:
        raise InvalidRangeError(f"n must be >= 1, got {n}")
    components = rng.choice(gmm.K, size=int(n), p=gmm.weights)
    return sample_components(gmm, components, rng)


def sample_components(
    gmm: GaussianMixture, components: np.ndarray, rng: np.random.Generator
) -> np.ndarray:
    """Draw one point from each listed component."""
    chol = np.linalg.cholesky(gmm.covariances)
    noise = rng.standard_normal((components.size, gmm.dim))
    return gmm.means[components] + np.einsum("nij,nj->ni", chol[components], noise)


def gmm_log_density(gmm: GaussianMixture, z) -> np.ndarray:
    """log sum_i w_i N(z; mu_i, Sigma_i) for a point or a batch."""
    zb, single = as_batch(z, "z")
    if zb.shape[1] != gmm.dim:
        raise DimensionMismatchError(f"z has dimension {zb.shape[1]}, mixture has {gmm.dim}")
    with np.errstate(divide="ignore"):
        log_weights = np.log(gmm.weights)
    per_component = np.stack(
        [
            multivariate_normal(mean=gmm.means[i], cov=gmm.covariances[i]).logpdf(zb).reshape(-1)
            for i in range(gmm.K)
        ],
        axis=1,
    )
    values = logsumexp(per_component + log_weights[None, :], axis=1)
    return float(values[0]) if single else values


def component_log_responsibilities(
    z, gmm: GaussianMixture, alpha: float = 1.0
) -> Tuple[np.ndarray, np.ndarray]:
    """
    Log-responsibilities of every component and their gradients in z.

    alpha = 1 gives the clean-data responsibilities; smaller alpha those of
    the noisy marginal at that signal level.

    Returns:
        (log_resp of shape (n, K), grad_log_resp of shape (n, K, d)); a
        single input vector drops the leading axis.
    """
    zb, single = as_batch(z, "z")
    terms = _posterior_terms(zb, alpha, gmm, with_gradients=True)
    return restore(terms.log_resp, single), restore(terms.grad_log_resp, single)
