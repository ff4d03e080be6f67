"""Shared fixtures for the universal_guidance tests."""

import numpy as np
import pytest

from universal_guidance.models import AnalyticDenoiser, GaussianMixture, default_world
from universal_guidance.schedule import build_linear_schedule


@pytest.fixture
def schedule():
    return build_linear_schedule(100)


@pytest.fixture
def short_schedule():
    return build_linear_schedule(20, 1e-3, 0.2)


@pytest.fixture
def world():
    return default_world()


@pytest.fixture
def denoiser(world, schedule):
    return AnalyticDenoiser(world, schedule)


@pytest.fixture
def full_cov_world():
    """Three components in 2-D with correlated covariances."""
    return GaussianMixture(
        weights=[0.2, 0.5, 0.3],
        means=[[-2.0, 1.0], [1.5, -0.5], [0.5, 2.5]],
        covariances=[
            [[0.5, 0.2], [0.2, 0.3]],
            [[0.4, -0.1], [-0.1, 0.6]],
            [[0.3, 0.0], [0.0, 0.3]],
        ],
    )


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
