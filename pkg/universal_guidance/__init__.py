"""
Universal guidance for diffusion sampling on analytic worlds

Forward guidance, backward guidance and per-step self-recurrence driven by
the exact denoiser of a Gaussian mixture, with closed-form oracles to check
what guided sampling produces.
"""

from .errors import (
    ConfigError,
    DegenerateScheduleError,
    DimensionMismatchError,
    GradientUnavailableError,
    InvalidRangeError,
    MissingJacobianError,
    NonFiniteError,
    ScheduleIndexError,
    UniversalGuidanceError,
    ZeroEmbeddingError,
)
from .schedule import (
    DiffusionState,
    NoiseSchedule,
    build_linear_schedule,
    forward_diffuse,
    true_noise_from,
)
from .models import (
    AnalyticDenoiser,
    Denoiser,
    DenoiserOutput,
    GaussianMixture,
    NoisyComponentClassifier,
    PerturbedDenoiser,
    analytic_denoiser,
    default_world,
    gmm_log_density,
    gmm_posterior_mean,
    gmm_sample,
    predict_z0,
)
from .guidance import (
    GuidanceLibraryEntry,
    GuidanceSpec,
    StrengthSchedule,
    backward_delta,
    backward_guided_eps,
    classifier_guidance_eps,
    combine_guidance,
    forward_guided_eps,
    make_component_classifier,
    make_embedding_match,
    make_label_field,
    make_linear_inverse,
    make_noisy_classifier,
)
from .factory import GuidanceFactory, create_guidance
from .sampler import (
    SampleResult,
    SamplerConfig,
    Trajectory,
    UniversalGuidanceSampler,
    ddim_step,
    ddpm_step,
    self_recur,
    universal_guidance_sample,
)
from .evaluation import (
    RunMetrics,
    World,
    ablation_forward_vs_backward,
    ablation_recurrence,
    compute_run_metrics,
    energy_distance,
    energy_permutation_test,
    oracle_component_sampler,
    oracle_linear_posterior,
)
from .config import RunConfig, load_config
from .plotting import emit_scatter_svg

__version__ = "0.1.0"

__all__ = [
    "UniversalGuidanceError",
    "InvalidRangeError",
    "DimensionMismatchError",
    "ScheduleIndexError",
    "DegenerateScheduleError",
    "MissingJacobianError",
    "GradientUnavailableError",
    "ZeroEmbeddingError",
    "NonFiniteError",
    "ConfigError",
    "NoiseSchedule",
    "DiffusionState",
    "build_linear_schedule",
    "forward_diffuse",
    "true_noise_from",
    "GaussianMixture",
    "default_world",
    "Denoiser",
    "DenoiserOutput",
    "AnalyticDenoiser",
    "PerturbedDenoiser",
    "NoisyComponentClassifier",
    "analytic_denoiser",
    "gmm_posterior_mean",
    "predict_z0",
    "gmm_sample",
    "gmm_log_density",
    "GuidanceSpec",
    "GuidanceLibraryEntry",
    "StrengthSchedule",
    "classifier_guidance_eps",
    "forward_guided_eps",
    "backward_delta",
    "backward_guided_eps",
    "combine_guidance",
    "make_component_classifier",
    "make_linear_inverse",
    "make_noisy_classifier",
    "make_label_field",
    "make_embedding_match",
    "GuidanceFactory",
    "create_guidance",
    "SamplerConfig",
    "SampleResult",
    "Trajectory",
    "UniversalGuidanceSampler",
    "ddim_step",
    "ddpm_step",
    "self_recur",
    "universal_guidance_sample",
    "RunMetrics",
    "World",
    "oracle_component_sampler",
    "oracle_linear_posterior",
    "energy_distance",
    "energy_permutation_test",
    "compute_run_metrics",
    "ablation_forward_vs_backward",
    "ablation_recurrence",
    "RunConfig",
    "load_config",
    "emit_scatter_svg",
]
