"""
Oracles, metrics and ablation harnesses.

Oracles draw from the exact conditional a perfectly guided sampler should
reach: a single mixture component for classifier guidance, or the
closed-form mixture posterior of a linear-Gaussian observation for inverse
problems. Metrics compare guided samples to those draws with the energy
distance and score constraint satisfaction and realness (log-density under
the world).
"""

from dataclasses import dataclass, field, replace
from typing import Any, Dict, List, Optional, Sequence
import logging

import numpy as np
import pandas as pd
from scipy.spatial.distance import cdist, pdist, squareform
from scipy.stats import multivariate_normal

from .errors import DimensionMismatchError, InvalidRangeError
from .guidance import (
    CLASSIFIER_KINDS,
    EMBEDDING_MATCH,
    LABEL_FIELD,
    LINEAR_INVERSE,
    ComponentLogProbabilities,
    GuidanceSpec,
    LinearMap,
    spec_losses,
)
from .models import (
    AnalyticDenoiser,
    Denoiser,
    GaussianMixture,
    gmm_log_density,
    gmm_sample,
    sample_components,
)
from .sampler import SamplerConfig, UniversalGuidanceSampler
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

MAX_ENERGY_POINTS = 4000
PERMUTATION_POINTS = 1000
DEFAULT_PERMUTATIONS = 200
DEFAULT_NOISE_VAR = 0.01
RESIDUAL_THRESHOLD = 0.1
COSINE_THRESHOLD = 0.95
L1_THRESHOLD = 0.1
REALNESS_TOLERANCE = 1.0

ABLATION_COLUMNS = [
    "cell",
    "w",
    "m",
    "k",
    "median_loss",
    "median_realness",
    "satisfaction_rate",
    "energy_distance",
]


def evaluation_rng(seed: int) -> np.random.Generator:
    """Stream for oracles and subsampling; its two-part key never equals a chain key."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(0, 1)))


# ---------------------------------------------------------------------------
# Oracles
# ---------------------------------------------------------------------------

def oracle_component_sampler(
    gmm: GaussianMixture, c: int, n: int, rng: np.random.Generator
) -> np.ndarray:
    """n draws from component c of the mixture."""
    if not 0 <= int(c) < gmm.K:
        raise InvalidRangeError(f"component {c} outside [0, {gmm.K})")
    if n < 1:
        raise InvalidRangeError(f"n must be >= 1, got {n}")
    return sample_components(gmm, np.full(int(n), int(c)), rng)


def linear_posterior_mixture(gmm: GaussianMixture, A, y, noise_var: float) -> GaussianMixture:
    """
    Exact posterior of z ~ gmm given y = A z + N(0, noise_var I).

    Each component is conditioned in closed form and reweighted by the
    marginal likelihood of y under it.
    """
    if noise_var <= 0.0:
        raise InvalidRangeError(f"noise_var must be positive, got {noise_var}")
    A = np.atleast_2d(np.asarray(A, dtype=float))
    y = np.asarray(y, dtype=float).reshape(-1)
    if A.shape != (y.size, gmm.dim):
        raise DimensionMismatchError(f"A must be ({y.size}, {gmm.dim}), got {A.shape}")

    log_weights = []
    means = []
    covs = []
    noise = noise_var * np.eye(y.size)
    for i in range(gmm.K):
        mu, sigma = gmm.means[i], gmm.covariances[i]
        innovation = A @ sigma @ A.T + noise
        gain = np.linalg.solve(innovation, A @ sigma).T
        means.append(mu + gain @ (y - A @ mu))
        cov = sigma - gain @ A @ sigma
        covs.append(0.5 * (cov + cov.T))
        with np.errstate(divide="ignore"):
            log_weights.append(
                np.log(gmm.weights[i]) + multivariate_normal(A @ mu, innovation).logpdf(y)
            )
    log_weights = np.array(log_weights)
    weights = np.exp(log_weights - np.logaddexp.reduce(log_weights))
    weights = weights / weights.sum()
    return GaussianMixture(weights=weights, means=np.array(means), covariances=np.array(covs))


def oracle_linear_posterior(
    gmm: GaussianMixture,
    A,
    y,
    noise_var: float,
    n: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """n draws from the mixture posterior under a linear-Gaussian observation."""
    return gmm_sample(linear_posterior_mixture(gmm, A, y, noise_var), n, rng)


def default_oracle(
    gmm: GaussianMixture,
    specs: Sequence[GuidanceSpec],
    n: int,
    rng: np.random.Generator,
    noise_var: float = DEFAULT_NOISE_VAR,
) -> Optional[np.ndarray]:
    """
    Oracle draws matching a guidance list, or None if no closed form exists.

    No specs gives the world itself; one classifier spec (clean or noisy) its target
    component; one linear-inverse spec the observation posterior.
    """
    if not specs:
        return gmm_sample(gmm, n, rng)
    if len(specs) == 1:
        spec = specs[0]
        if spec.kind in CLASSIFIER_KINDS:
            return oracle_component_sampler(gmm, int(spec.prompt), n, rng)
        if spec.kind == LINEAR_INVERSE:
            return oracle_linear_posterior(gmm, spec.feature.matrix, spec.prompt, noise_var, n, rng)
    return None


# ---------------------------------------------------------------------------
# Energy statistics
# ---------------------------------------------------------------------------

def _mean_distance(a: np.ndarray, b: np.ndarray, chunk: int = 1024) -> float:
    total = 0.0
    for start in range(0, a.shape[0], chunk):
        total += cdist(a[start:start + chunk], b).sum()
    return total / (a.shape[0] * b.shape[0])


def _subsample(x: np.ndarray, limit: int, rng: np.random.Generator) -> np.ndarray:
    if x.shape[0] <= limit:
        return x
    return x[np.sort(rng.choice(x.shape[0], size=limit, replace=False))]


def energy_distance(
    samples_a,
    samples_b,
    max_points: int = MAX_ENERGY_POINTS,
    rng: Optional[np.random.Generator] = None,
) -> float:
    """
    Two-sample energy statistic 2 E|a-b| - E|a-a'| - E|b-b'|.

    All pairs are used, diagonal included (V-statistic), so a set against
    itself gives exactly 0. Sets larger than max_points are subsampled
    without replacement using rng (seed 0 when not given).
    """
    a = np.atleast_2d(np.asarray(samples_a, dtype=float))
    b = np.atleast_2d(np.asarray(samples_b, dtype=float))
    if a.shape[0] == 0 or b.shape[0] == 0:
        raise InvalidRangeError("energy_distance needs nonempty sample sets")
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dimensions {a.shape[1]} and {b.shape[1]} differ")
    if a.shape[0] > max_points or b.shape[0] > max_points:
        rng = rng if rng is not None else np.random.default_rng(0)
        a = _subsample(a, max_points, rng)
        b = _subsample(b, max_points, rng)
    value = 2.0 * _mean_distance(a, b) - _mean_distance(a, a) - _mean_distance(b, b)
    return max(float(value), 0.0)


@dataclass
class EnergyTestResult:
    """Permutation test of equal distributions."""
    statistic: float
    null_quantile: float
    p_value: float
    null: np.ndarray = field(repr=False)

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {
            "statistic": self.statistic,
            "null_quantile": self.null_quantile,
            "p_value": self.p_value,
        }


def energy_permutation_test(
    samples_a,
    samples_b,
    n_permutations: int = DEFAULT_PERMUTATIONS,
    rng: Optional[np.random.Generator] = None,
    max_points: int = PERMUTATION_POINTS,
    quantile: float = 0.99,
) -> EnergyTestResult:
    """
    Energy-distance permutation test.

    The pooled distance matrix is built once and relabelled per
    permutation. Each side is subsampled to max_points first.
    """
    rng = rng if rng is not None else np.random.default_rng(0)
    a = _subsample(np.atleast_2d(np.asarray(samples_a, dtype=float)), max_points, rng)
    b = _subsample(np.atleast_2d(np.asarray(samples_b, dtype=float)), max_points, rng)
    na = a.shape[0]
    dist = squareform(pdist(np.vstack([a, b])))

    def statistic(idx_a, idx_b):
        return (
            2.0 * dist[np.ix_(idx_a, idx_b)].mean()
            - dist[np.ix_(idx_a, idx_a)].mean()
            - dist[np.ix_(idx_b, idx_b)].mean()
        )

    labels = np.arange(dist.shape[0])
    observed = statistic(labels[:na], labels[na:])
    null = np.empty(n_permutations)
    for i in range(n_permutations):
        rng.shuffle(labels)
        null[i] = statistic(labels[:na], labels[na:])
    p_value = (np.sum(null >= observed) + 1) / (n_permutations + 1)
    return EnergyTestResult(
        statistic=float(max(observed, 0.0)),
        null_quantile=float(np.quantile(null, quantile)),
        p_value=float(p_value),
        null=null,
    )


# ---------------------------------------------------------------------------
# Metrics
# ---------------------------------------------------------------------------

@dataclass
class SummaryStats:
    """Mean, median and 5%/95% quantiles of a sample of values."""
    mean: float
    median: float
    q05: float
    q95: float

    @classmethod
    def from_values(cls, values) -> "SummaryStats":
        values = np.asarray(values, dtype=float)
        if values.size == 0:
            return cls(np.nan, np.nan, np.nan, np.nan)
        q05, median, q95 = np.quantile(values, [0.05, 0.5, 0.95])
        return cls(float(values.mean()), float(median), float(q05), float(q95))

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {"mean": self.mean, "median": self.median, "q05": self.q05, "q95": self.q95}


def constraint_satisfied(spec: GuidanceSpec, samples) -> np.ndarray:
    """
    Per-sample pass/fail of a guidance's acceptance threshold.

    classifiers: argmax of the clean classifier equals the prompt; linear-inverse:
    ||y - Ax|| < 0.1; label-field: every sign matches its label;
    embedding-match: cosine > 0.95 or l1 distance < 0.1.
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    if spec.kind in CLASSIFIER_KINDS:
        feature = spec.feature
        assert isinstance(feature, ComponentLogProbabilities)
        return np.argmax(feature(x), axis=1) == int(spec.prompt)
    if spec.kind == LINEAR_INVERSE:
        residual = np.linalg.norm(spec.feature(x) - spec.prompt, axis=1)
        return residual < RESIDUAL_THRESHOLD
    if spec.kind == LABEL_FIELD:
        return np.all((x > 0.0) == (np.asarray(spec.prompt) > 0.5), axis=1)
    if spec.kind == EMBEDDING_MATCH:
        y = spec.feature(x)
        target = np.asarray(spec.prompt)
        if spec.params.get("mode", "cosine") == "l1":
            return np.sum(np.abs(y - target), axis=1) < L1_THRESHOLD
        norms = np.linalg.norm(y, axis=1) * np.linalg.norm(target)
        with np.errstate(invalid="ignore", divide="ignore"):
            cosine = (y @ target) / norms
        return np.nan_to_num(cosine, nan=-1.0) > COSINE_THRESHOLD
    raise InvalidRangeError(f"No acceptance threshold for guidance kind '{spec.kind}'")


def guidance_residual(spec: GuidanceSpec, samples) -> np.ndarray:
    """||y - A x|| for a linear-inverse spec."""
    if not isinstance(spec.feature, LinearMap):
        raise InvalidRangeError("residuals are defined for linear feature maps")
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    return np.linalg.norm(spec.feature(x) - spec.prompt, axis=1)


@dataclass
class RunMetrics:
    """Losses, realness, satisfaction rates and oracle distance of a run."""
    n_samples: int
    losses: Dict[str, SummaryStats]
    realness: SummaryStats
    satisfaction: Dict[str, float]
    joint_satisfaction: Optional[float]
    energy_distance: Optional[float] = None
    energy_test: Optional[EnergyTestResult] = None
    extra: Dict[str, Any] = field(default_factory=dict)

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {
            "n_samples": self.n_samples,
            "losses": {name: stats.to_dict() for name, stats in self.losses.items()},
            "realness": self.realness.to_dict(),
            "satisfaction": dict(self.satisfaction),
            "joint_satisfaction": self.joint_satisfaction,
            "energy_distance": self.energy_distance,
            "energy_test": self.energy_test.to_dict() if self.energy_test else None,
            **self.extra,
        }


def spec_names(specs: Sequence[GuidanceSpec]) -> List[str]:
    """Unique display names: name, or name_<index> on collisions."""
    names = [spec.name or spec.kind for spec in specs]
    return [name if names.count(name) == 1 else f"{name}_{i}" for i, name in enumerate(names)]


def compute_run_metrics(
    samples,
    specs: Sequence[GuidanceSpec],
    gmm: GaussianMixture,
    oracle_samples: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
    n_permutations: int = 0,
) -> RunMetrics:
    """
    Score final samples.

    Args:
        samples: (n, d) final samples
        specs: Guidance specs used for the run
        gmm: World distribution (realness = log-density under it)
        oracle_samples: Reference draws for the energy distance
        rng: Generator for subsampling and permutations
        n_permutations: Run a permutation test with this many permutations

    Returns:
        RunMetrics
    """
    x = np.atleast_2d(np.asarray(samples, dtype=float))
    rng = rng if rng is not None else np.random.default_rng(0)
    names = spec_names(specs)
    losses = spec_losses(specs, x)
    loss_stats = {name: SummaryStats.from_values(losses[:, i]) for i, name in enumerate(names)}

    satisfaction: Dict[str, float] = {}
    joint = np.ones(x.shape[0], dtype=bool)
    checked = False
    for name, spec in zip(names, specs):
        try:
            passed = constraint_satisfied(spec, x)
        except InvalidRangeError:
            continue
        satisfaction[name] = float(passed.mean())
        joint &= passed
        checked = True

    distance = None
    test = None
    if oracle_samples is not None:
        distance = energy_distance(x, oracle_samples, rng=rng)
        if n_permutations > 0:
            test = energy_permutation_test(x, oracle_samples, n_permutations, rng)

    return RunMetrics(
        n_samples=int(x.shape[0]),
        losses=loss_stats,
        realness=SummaryStats.from_values(gmm_log_density(gmm, x)),
        satisfaction=satisfaction,
        joint_satisfaction=float(joint.mean()) if checked else None,
        energy_distance=distance,
        energy_test=test,
    )


# ---------------------------------------------------------------------------
# Ablations
# ---------------------------------------------------------------------------

@dataclass
class World:
    """Everything a sampling run needs besides the guidance list."""
    gmm: GaussianMixture
    schedule: NoiseSchedule
    config: SamplerConfig = field(default_factory=SamplerConfig)
    denoiser: Optional[Denoiser] = None

    def __post_init__(self):
        if self.denoiser is None:
            self.denoiser = AnalyticDenoiser(self.gmm, self.schedule)

    def sample(self, specs: Sequence[GuidanceSpec], n_chains: int, **config_changes):
        config = replace(self.config, **config_changes) if config_changes else self.config
        sampler = UniversalGuidanceSampler(config, self.schedule, self.denoiser, specs)
        return sampler.sample(n_chains)


@dataclass
class AblationReport:
    """One row per grid cell in ABLATION_COLUMNS order."""
    table: pd.DataFrame
    dominance: Dict[float, bool] = field(default_factory=dict)

    def to_text(self) -> str:
        """Tab-separated table, columns in ABLATION_COLUMNS order."""
        return self.table[ABLATION_COLUMNS].to_csv(sep="\t", index=False)

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {
            "columns": ABLATION_COLUMNS,
            "rows": self.table[ABLATION_COLUMNS].to_dict(orient="records"),
            "backward_dominates": {str(w): flag for w, flag in self.dominance.items()},
        }


def _cell_row(
    cell: int, w: float, m: int, k: int, spec: Optional[GuidanceSpec], result, gmm, oracle, rng
) -> Dict:
    samples = result.samples
    if spec is not None:
        loss = spec.loss_value(samples)
        try:
            rate = float(constraint_satisfied(spec, samples).mean())
        except InvalidRangeError:
            rate = np.nan
    else:
        loss = np.full(samples.shape[0], np.nan)
        rate = np.nan
    return {
        "cell": cell,
        "w": w,
        "m": m,
        "k": k,
        "median_loss": float(np.median(loss)) if spec is not None else np.nan,
        "median_realness": float(np.median(gmm_log_density(gmm, samples))),
        "satisfaction_rate": rate,
        "energy_distance": (
            energy_distance(samples, oracle, rng=rng) if oracle is not None else np.nan
        ),
    }


def ablation_forward_vs_backward(
    world: World,
    spec_base: GuidanceSpec,
    m_values: Sequence[int],
    w_values: Sequence[float],
    n_chains: int,
    realness_tolerance: float = REALNESS_TOLERANCE,
) -> AblationReport:
    """
    Forward-only versus forward+backward guidance over a (m, w) grid.

    Every cell reuses the same chain seeds. For each w the report marks
    whether every backward-enabled cell has a lower median loss than the
    m = 0 cell at a median realness within realness_tolerance.
    """
    if spec_base.kind != LINEAR_INVERSE and spec_base.kind not in CLASSIFIER_KINDS:
        raise InvalidRangeError(
            "forward/backward ablation expects a linear-inverse or classifier spec"
        )
    rows = []
    cell = 0
    for w in w_values:
        for m in m_values:
            spec = spec_base.with_settings(w=float(w), backward_steps=int(m))
            logger.info(f"Ablation cell {cell}: w={w}, m={m}")
            result = world.sample([spec], n_chains)
            rows.append(_cell_row(cell, float(w), int(m), world.config.recurrence_k, spec, result,
                                  world.gmm, None, None))
            cell += 1
    table = pd.DataFrame(rows, columns=ABLATION_COLUMNS)

    dominance: Dict[float, bool] = {}
    for w, group in table.groupby("w", sort=False):
        forward_only = group[group["m"] == 0]
        backward = group[group["m"] > 0]
        if forward_only.empty or backward.empty:
            continue
        base = forward_only.iloc[0]
        dominance[float(w)] = bool(
            np.all(backward["median_loss"] < base["median_loss"])
            and np.all(
                np.abs(backward["median_realness"] - base["median_realness"]) <= realness_tolerance
            )
        )
    return AblationReport(table=table, dominance=dominance)


def ablation_recurrence(
    world: World,
    spec: Optional[GuidanceSpec],
    k_grid: Sequence[int],
    n_chains: int,
    oracle_samples: Optional[np.ndarray] = None,
    rng: Optional[np.random.Generator] = None,
) -> AblationReport:
    """
    Median loss, median realness and oracle energy distance per k.

    spec=None runs unguided chains (the marginal-preservation control).
    The oracle defaults to default_oracle for the spec.
    """
    if not k_grid:
        raise InvalidRangeError("k_grid must not be empty")
    rng = rng if rng is not None else evaluation_rng(world.config.seed)
    specs = [spec] if spec is not None else []
    if oracle_samples is None:
        oracle_samples = default_oracle(world.gmm, specs, n_chains, rng)

    rows = []
    for cell, k in enumerate(k_grid):
        logger.info(f"Recurrence ablation cell {cell}: k={k}")
        result = world.sample(specs, n_chains, recurrence_k=int(k))
        w = spec.strength.w if spec is not None else 0.0
        m = spec.backward_steps if spec is not None else 0
        rows.append(_cell_row(cell, w, m, int(k), spec, result, world.gmm, oracle_samples,
                              evaluation_rng(world.config.seed)))
    return AblationReport(table=pd.DataFrame(rows, columns=ABLATION_COLUMNS))
