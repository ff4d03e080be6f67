"""
Reverse-process steps, self-recurrence and the universal guidance loop.

For t = T..1 and n = 1..k the sampler predicts the clean point, applies
forward guidance for every spec with s(t) > 0, backward guidance for every
spec with m > 0, steps to z_{t-1}, and, unless n = k, re-noises back to
scale t. Chains are vectorized; each chain draws from its own stream
``default_rng(SeedSequence(seed, spawn_key=(chain_index,)))`` so a chain's
output does not depend on how many chains run beside it.
"""

from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, IO, List, Optional, Sequence, Union
import json
import logging

import numpy as np

from ._array import check_finite
from .errors import InvalidRangeError, NonFiniteError
from .guidance import GuidanceSpec, combine_guidance, spec_losses
from .models import Denoiser, predict_z0
from .schedule import NoiseSchedule

logger = logging.getLogger(__name__)

DDIM = "ddim"
DDPM = "ddpm"
SAMPLER_KINDS = {
    "ddim": DDIM,
    "ddim-deterministic": DDIM,
    "ddpm": DDPM,
    "ddpm-ancestral": DDPM,
}


@dataclass(frozen=True)
class SamplerConfig:
    """Sampler kind, step count, recurrence count k and seed."""
    kind: str = DDIM
    T: Optional[int] = None
    recurrence_k: int = 1
    seed: int = 0
    record_trajectory: bool = False
    eta: float = 0.0

    def __post_init__(self):
        kind = SAMPLER_KINDS.get(str(self.kind).lower())
        if kind is None:
            raise InvalidRangeError(
                f"Unknown sampler kind: {self.kind}. Available: {', '.join(sorted(SAMPLER_KINDS))}"
            )
        object.__setattr__(self, "kind", kind)
        if int(self.recurrence_k) != self.recurrence_k or self.recurrence_k < 1:
            raise InvalidRangeError(
                f"recurrence_k must be an integer >= 1, got {self.recurrence_k}"
            )
        if self.T is not None and self.T < 1:
            raise InvalidRangeError(f"T must be >= 1, got {self.T}")
        if not 0.0 <= self.eta <= 1.0:
            raise InvalidRangeError(f"eta must lie in [0, 1], got {self.eta}")

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {
            "kind": self.kind,
            "T": self.T,
            "recurrence_k": self.recurrence_k,
            "seed": self.seed,
            "record_trajectory": self.record_trajectory,
            "eta": self.eta,
        }


@dataclass
class TrajectoryRecord:
    """State of all chains at one (t, n)."""
    t: int
    n: int
    z_t: np.ndarray
    eps_before: np.ndarray
    eps_after: np.ndarray
    z0_hat: np.ndarray
    delta_z0: np.ndarray
    losses: np.ndarray
    chain_offset: int = 0

    def rows(self):
        """Yield one JSON-ready dict per chain."""
        for i in range(self.z_t.shape[0]):
            yield {
                "chain": self.chain_offset + i,
                "t": self.t,
                "n": self.n,
                "z_t": self.z_t[i].tolist(),
                "eps_before": self.eps_before[i].tolist(),
                "eps_after": self.eps_after[i].tolist(),
                "z0_hat": self.z0_hat[i].tolist(),
                "delta_z0": self.delta_z0[i].tolist(),
                "losses": [None if np.isnan(v) else float(v) for v in self.losses[i]],
            }


@dataclass
class Trajectory:
    """Per-(t, n) records of a sampling run."""
    records: List[TrajectoryRecord] = field(default_factory=list)

    def __len__(self) -> int:
        return len(self.records)

    def append(self, record: TrajectoryRecord) -> None:
        self.records.append(record)

    def write_jsonl(self, path: Union[str, Path]) -> Path:
        """Write one line per (chain, t, n)."""
        path = Path(path)
        with open(path, "w") as f:
            write_records(self.records, f)
        logger.info(f"Trajectory written to {path}")
        return path


def write_records(records: Sequence[TrajectoryRecord], stream: IO[str]) -> None:
    for record in records:
        for row in record.rows():
            stream.write(json.dumps(row, sort_keys=True) + "\n")


@dataclass
class SampleResult:
    """Final samples (n_chains, d) plus per-spec losses and the trajectory."""
    samples: np.ndarray
    losses: np.ndarray
    trajectory: Optional[Trajectory] = None
    denoiser_calls: int = 0
    recurrence_draws: int = 0


# ---------------------------------------------------------------------------
# Steps
# ---------------------------------------------------------------------------

def ddim_step(
    z_t,
    eps_hat,
    t: int,
    schedule: NoiseSchedule,
    eta: float = 0.0,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    DDIM update sqrt(a_{t-1}) z0_hat + sqrt(1 - a_{t-1} - sigma^2) eps_hat + sigma xi.

    eta = 0 is the deterministic step; eta = 1 matches ancestral sampling.
    """
    schedule.check_index(t)
    alpha_t = schedule.alpha(t)
    alpha_prev = schedule.alpha(t - 1)
    z0_hat = predict_z0(z_t, eps_hat, t, schedule)
    eps = np.asarray(eps_hat, dtype=float)
    sigma = eta * np.sqrt((1.0 - alpha_prev) / (1.0 - alpha_t) * (1.0 - alpha_t / alpha_prev))
    if sigma == 0.0:
        return np.sqrt(alpha_prev) * z0_hat + np.sqrt(1.0 - alpha_prev) * eps

    xi = _step_noise(eps.shape, rng, noise)
    direction = np.sqrt(max(1.0 - alpha_prev - sigma**2, 0.0))
    return np.sqrt(alpha_prev) * z0_hat + direction * eps + sigma * xi


def ddpm_posterior(t: int, schedule: NoiseSchedule):
    """Coefficients (c_z0, c_zt, sigma_t) of the ancestral step."""
    schedule.check_index(t)
    alpha_t = schedule.alpha(t)
    alpha_prev = schedule.alpha(t - 1)
    ratio = alpha_t / alpha_prev
    coef_z0 = np.sqrt(alpha_prev) * (1.0 - ratio) / (1.0 - alpha_t)
    coef_zt = np.sqrt(ratio) * (1.0 - alpha_prev) / (1.0 - alpha_t)
    sigma = 0.0 if t == 1 else np.sqrt((1.0 - ratio) * (1.0 - alpha_prev) / (1.0 - alpha_t))
    return coef_z0, coef_zt, sigma


def ddpm_step(
    z_t,
    eps_hat,
    t: int,
    schedule: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Ancestral step: posterior mean given z0_hat plus sigma_t xi (sigma_1 = 0)."""
    z0_hat = predict_z0(z_t, eps_hat, t, schedule)
    coef_z0, coef_zt, sigma = ddpm_posterior(t, schedule)
    mean = coef_z0 * z0_hat + coef_zt * np.asarray(z_t, dtype=float)
    if sigma == 0.0:
        return mean
    return mean + sigma * _step_noise(mean.shape, rng, noise)


def self_recur(
    z_prev,
    t: int,
    schedule: NoiseSchedule,
    rng: Optional[np.random.Generator] = None,
    noise: Optional[np.ndarray] = None,
) -> np.ndarray:
    """
    Re-noise z_{t-1} back to scale t.

    z'_t = sqrt(a_t / a_{t-1}) z_{t-1} + sqrt(1 - a_t / a_{t-1}) eps'
    """
    ratio = schedule.ratio(t)
    z = np.asarray(z_prev, dtype=float)
    eps = _step_noise(z.shape, rng, noise)
    return np.sqrt(ratio) * z + np.sqrt(1.0 - ratio) * eps


def _step_noise(
    shape, rng: Optional[np.random.Generator], noise: Optional[np.ndarray]
) -> np.ndarray:
    if noise is not None:
        noise = np.asarray(noise, dtype=float)
        if noise.shape != tuple(shape):
            raise InvalidRangeError(f"noise shape {noise.shape} does not match {tuple(shape)}")
        return noise
    if rng is None:
        raise InvalidRangeError("a stochastic step needs an rng or explicit noise")
    return rng.standard_normal(shape)


# ---------------------------------------------------------------------------
# Chain streams
# ---------------------------------------------------------------------------

def chain_rng(seed: int, chain_index: int) -> np.random.Generator:
    """Independent stream of one chain: SeedSequence(seed, spawn_key=(chain_index,))."""
    return np.random.default_rng(np.random.SeedSequence(int(seed), spawn_key=(int(chain_index),)))


class ChainStreams:
    """One Generator per chain, drawn row by row into (n, d) batches."""

    def __init__(self, seed: int, n_chains: int, first_chain: int = 0):
        self.generators = [chain_rng(seed, first_chain + i) for i in range(n_chains)]

    def __len__(self) -> int:
        return len(self.generators)

    def standard_normal(self, d: int) -> np.ndarray:
        return np.stack([g.standard_normal(d) for g in self.generators])


# ---------------------------------------------------------------------------
# Universal guidance loop
# ---------------------------------------------------------------------------

class UniversalGuidanceSampler:
    """Runs the universal guidance loop over a batch of chains."""

    def __init__(
        self,
        config: SamplerConfig,
        schedule: NoiseSchedule,
        denoiser: Denoiser,
        specs: Optional[Sequence[GuidanceSpec]] = None,
    ):
        """
        Initialize the sampler.

        Args:
            config: Sampler settings (kind, k, seed, trajectory flag)
            schedule: Noise schedule
            denoiser: Noise-prediction model
            specs: Guidance specs; empty for unguided sampling
        """
        if config.T is not None and config.T != schedule.T:
            raise InvalidRangeError(f"sampler T={config.T} disagrees with schedule T={schedule.T}")
        self.config = config
        self.schedule = schedule
        self.denoiser = denoiser
        self.specs = list(specs or [])

    def _step(self, z_t, eps, t: int, streams: Optional[ChainStreams]) -> np.ndarray:
        kind = self.config.kind
        if kind == DDIM:
            noise = None
            if self.config.eta > 0.0 and t > 1:
                noise = streams.standard_normal(z_t.shape[1])
            eta = self.config.eta if t > 1 else 0.0
            return ddim_step(z_t, eps, t, self.schedule, eta=eta, noise=noise)
        noise = streams.standard_normal(z_t.shape[1]) if t > 1 else None
        return ddpm_step(z_t, eps, t, self.schedule, noise=noise)

    def sample(
        self,
        n_chains: int = 1,
        first_chain: int = 0,
        trajectory_stream: Optional[IO[str]] = None,
    ) -> SampleResult:
        """
        Draw n_chains samples.

        Args:
            n_chains: Number of chains in this batch
            first_chain: Global index of the first chain (selects streams)
            trajectory_stream: Text stream receiving trajectory rows as JSON
                lines while sampling

        Returns:
            SampleResult

        Raises:
            NonFiniteError: With t, recurrence index and chain on abort
        """
        if n_chains < 1:
            raise InvalidRangeError(f"n_chains must be >= 1, got {n_chains}")
        config = self.config
        d = self.denoiser.dim
        k = config.recurrence_k
        streams = ChainStreams(config.seed, n_chains, first_chain)
        guided = bool(self.specs)
        record = config.record_trajectory or trajectory_stream is not None
        trajectory = Trajectory() if config.record_trajectory else None
        calls = 0
        draws = 0

        z_t = streams.standard_normal(d)
        for t in range(self.schedule.T, 0, -1):
            for n in range(1, k + 1):
                try:
                    out = self.denoiser(z_t, t, want_jacobian=guided)
                    calls += 1
                    eps = np.asarray(out.eps_hat, dtype=float)
                    if guided:
                        combined = combine_guidance(self.specs, z_t, t, out, self.schedule)
                        guided_eps = combined.eps_hat
                    else:
                        guided_eps = eps
                    check_finite(guided_eps, "noise prediction", batched=True)
                    z_prev = self._step(z_t, guided_eps, t, streams)
                    check_finite(z_prev, "sampler iterate", batched=True)
                except NonFiniteError as err:
                    raise self._locate(err, t, n, first_chain) from err

                if record:
                    rec = self._record(t, n, z_t, eps, guided_eps, combined if guided else None)
                    rec.chain_offset = first_chain
                    if trajectory is not None:
                        trajectory.append(rec)
                    if trajectory_stream is not None:
                        write_records([rec], trajectory_stream)

                if n < k:
                    z_t = self_recur(z_prev, t, self.schedule, noise=streams.standard_normal(d))
                    draws += 1
                else:
                    z_t = z_prev
            if t % 10 == 0:
                logger.debug(f"t={t}: {n_chains} chain(s) advanced")

        losses = spec_losses(self.specs, z_t)
        logger.info(
            f"Sampled {n_chains} chain(s): {calls} denoiser calls, "
            f"{draws} recurrence draws per chain"
        )
        return SampleResult(
            samples=z_t,
            losses=losses,
            trajectory=trajectory,
            denoiser_calls=calls,
            recurrence_draws=draws,
        )

    def _record(self, t, n, z_t, eps, guided_eps, combined) -> TrajectoryRecord:
        n_chains = z_t.shape[0]
        if combined is None:
            z0_hat = predict_z0(z_t, eps, t, self.schedule)
            delta = np.zeros_like(z_t)
            losses = np.zeros((n_chains, 0))
        else:
            z0_hat = combined.z0_hat
            delta = combined.delta_z0
            losses = np.where(
                np.isnan(combined.backward_losses),
                combined.forward_losses,
                combined.backward_losses,
            )
        return TrajectoryRecord(
            t=t, n=n, z_t=z_t.copy(), eps_before=eps.copy(), eps_after=np.array(guided_eps),
            z0_hat=z0_hat, delta_z0=delta, losses=losses,
        )

    @staticmethod
    def _locate(err: NonFiniteError, t: int, n: int, first_chain: int) -> NonFiniteError:
        chain = None if err.chain is None else first_chain + err.chain
        logger.error(f"Sampling aborted at t={t}, n={n}, chain={chain}: {err.args[0]}")
        return err.with_context(t=t, recurrence=n, chain=chain)


def universal_guidance_sample(
    config: SamplerConfig,
    schedule: NoiseSchedule,
    denoiser: Denoiser,
    specs: Optional[Sequence[GuidanceSpec]] = None,
    n_chains: int = 1,
) -> SampleResult:
    """
    Convenience function running the universal guidance loop.

    A single chain (n_chains=1) returns samples of shape (1, d).
    """
    sampler = UniversalGuidanceSampler(config, schedule, denoiser, specs)
    return sampler.sample(n_chains)


def unguided_sample(
    config: SamplerConfig, schedule: NoiseSchedule, denoiser: Denoiser, n_chains: int
) -> np.ndarray:
    """Plain DDIM/DDPM samples."""
    return universal_guidance_sample(config, schedule, denoiser, [], n_chains).samples
