import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from stochmikado.spectral_grid import GridSpec, random_bandlimited

settings.register_profile("default", deadline=None, max_examples=25,
                          suppress_health_check=[HealthCheck.too_slow])
settings.load_profile("default")


@pytest.fixture(scope="session")
def grid64():
    return GridSpec(2, 64, 17)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def band(grid, seed, kmax=4, **kw):
    return random_bandlimited(grid, np.random.default_rng(seed), kmax, **kw)
