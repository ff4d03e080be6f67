"""
Noise schedule and forward diffusion process.

alpha_t is the cumulative signal coefficient: a clean point z0 diffused for
t steps is sqrt(alpha_t) * z0 + sqrt(1 - alpha_t) * eps. Storage is 0-based,
so ``alphas[t - 1]`` holds alpha_t; t = 0 denotes clean data and alpha_0 = 1.
"""

from dataclasses import dataclass, field
from typing import Dict, Optional
import logging

import numpy as np

from ._array import check_same_shape
from .errors import DegenerateScheduleError, InvalidRangeError, ScheduleIndexError

logger = logging.getLogger(__name__)

DEFAULT_T = 100
DEFAULT_BETA_MIN = 1e-3
DEFAULT_BETA_MAX = 0.2


@dataclass(frozen=True)
class NoiseSchedule:
    """Cumulative signal coefficients alpha_1..alpha_T."""
    alphas: np.ndarray
    strict: bool = field(default=True, repr=False)

    def __post_init__(self):
        alphas = np.array(self.alphas, dtype=float).reshape(-1)
        if alphas.size == 0:
            raise InvalidRangeError("schedule needs at least one step")
        if np.any(alphas <= 0.0) or np.any(alphas > 1.0):
            raise InvalidRangeError("every alpha_t must lie in (0, 1]")
        steps = np.diff(alphas)
        if self.strict and np.any(steps >= 0.0):
            raise InvalidRangeError("alphas must be strictly decreasing in t")
        if np.any(steps > 0.0):
            raise InvalidRangeError("alphas must be non-increasing in t")
        alphas.setflags(write=False)
        object.__setattr__(self, "alphas", alphas)

    @property
    def T(self) -> int:
        return int(self.alphas.size)

    def alpha(self, t: int) -> float:
        """alpha_t with the alpha_0 = 1 convention."""
        self.check_index(t, allow_zero=True)
        return 1.0 if t == 0 else float(self.alphas[t - 1])

    def ratio(self, t: int) -> float:
        """alpha_t / alpha_{t-1}."""
        self.check_index(t)
        return self.alpha(t) / self.alpha(t - 1)

    def check_index(self, t: int, allow_zero: bool = False) -> None:
        low = 0 if allow_zero else 1
        if not low <= int(t) <= self.T:
            raise ScheduleIndexError(f"t={t} outside [{low}, {self.T}]")

    def to_dict(self) -> Dict:
        """Convert to dictionary"""
        return {"T": self.T, "alphas": self.alphas.tolist()}


def build_linear_schedule(
    T: int = DEFAULT_T,
    beta_min: float = DEFAULT_BETA_MIN,
    beta_max: float = DEFAULT_BETA_MAX,
) -> NoiseSchedule:
    """
    Build alpha_t = prod_{s<=t} (1 - beta_s) with linearly spaced betas.

    Args:
        T: Number of diffusion steps
        beta_min: First beta
        beta_max: Last beta

    Returns:
        NoiseSchedule

    Raises:
        InvalidRangeError: If T < 1 or not 0 < beta_min <= beta_max < 1
    """
    if int(T) != T or T < 1:
        raise InvalidRangeError(f"T must be a positive integer, got {T}")
    if not 0.0 < beta_min <= beta_max < 1.0:
        raise InvalidRangeError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )
    betas = np.linspace(beta_min, beta_max, int(T))
    alphas = np.cumprod(1.0 - betas)
    logger.debug(f"Linear schedule T={T}: alpha_T={alphas[-1]:.3e}")
    return NoiseSchedule(alphas)


def forward_diffuse(z0, t: int, eps, schedule: NoiseSchedule) -> np.ndarray:
    """
    Diffuse a clean point t steps: sqrt(alpha_t) z0 + sqrt(1 - alpha_t) eps.

    t = 0 returns z0 unchanged.
    """
    schedule.check_index(t, allow_zero=True)
    z0_arr = np.asarray(z0, dtype=float)
    eps_arr = np.asarray(eps, dtype=float)
    check_same_shape(z0_arr, eps_arr, "forward_diffuse(z0, eps)")
    alpha = schedule.alpha(t)
    return np.sqrt(alpha) * z0_arr + np.sqrt(1.0 - alpha) * eps_arr


def true_noise_from(z_t, z0, t: int, schedule: NoiseSchedule) -> np.ndarray:
    """Invert forward_diffuse for the injected noise."""
    schedule.check_index(t, allow_zero=True)
    alpha = schedule.alpha(t)
    if alpha >= 1.0:
        raise DegenerateScheduleError(f"alpha_{t} = 1: no noise to recover")
    zt_arr = np.asarray(z_t, dtype=float)
    z0_arr = np.asarray(z0, dtype=float)
    check_same_shape(zt_arr, z0_arr, "true_noise_from(z_t, z0)")
    return (zt_arr - np.sqrt(alpha) * z0_arr) / np.sqrt(1.0 - alpha)


@dataclass(frozen=True)
class DiffusionState:
    """A point z at time index t (t = 0 is clean data)."""
    z: np.ndarray
    t: int

    @property
    def dim(self) -> int:
        return int(np.asarray(self.z).shape[-1])

    def diffuse(self, t: int, eps, schedule: NoiseSchedule) -> "DiffusionState":
        """Diffuse a clean state to time t."""
        if self.t != 0:
            raise InvalidRangeError("only clean states (t=0) can be forward-diffused")
        return DiffusionState(forward_diffuse(self.z, t, eps, schedule), t)


def schedule_from_config(params: Optional[Dict] = None) -> NoiseSchedule:
    """Build the linear schedule from a config block (T, beta_min, beta_max)."""
    params = params or {}
    return build_linear_schedule(
        T=params.get("T", DEFAULT_T),
        beta_min=params.get("beta_min", DEFAULT_BETA_MIN),
        beta_max=params.get("beta_max", DEFAULT_BETA_MAX),
    )
