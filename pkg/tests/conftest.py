import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from graphon_invest.market import AgentCoeffs, TimeGrid

settings.register_profile("repo", max_examples=60, deadline=None,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("repo")


@pytest.fixture
def standing():
    """d=1, sigma=sigma*=1, theta=0.2, eta=0.5, xi=1: the scalar example used throughout."""
    return AgentCoeffs(1, 1.0, 1.0, 0.2, 0.5, 1.0)


@pytest.fixture
def no_common():
    return AgentCoeffs(1, 1.0, 0.0, 0.2, 0.5, 1.0)


@pytest.fixture
def unit_grid():
    return TimeGrid(1.0, 1)


def random_coeffs(rng, n, d, A):
    return [AgentCoeffs(d, rng.uniform(0.5, 1.5, d), rng.uniform(-1, 1, d), rng.uniform(-0.5, 0.5, d),
                        float(rng.uniform(0.1, 0.9)), 0.0, A) for _ in range(n)]
