import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from etasbi.core import Catalog, EtasParams
from etasbi.simulate import SimConfig, simulate_branching

settings.register_profile(
    "default", deadline=None, max_examples=40, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")

TRUE = EtasParams(0.2, 0.2, 1.5, 0.5, 2.0, 2.4)


def random_catalog(rng, n, T=100.0, m0=3.0, beta=2.4):
    times = np.sort(rng.uniform(0, T, n))
    times = times[np.concatenate([[True], np.diff(times) > 0])]
    mags = m0 + rng.exponential(1 / beta, times.size)
    return Catalog(times, mags, T, m0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def small_catalog():
    """Simulated catalog at the reference parameters, T = 1000."""
    res = simulate_branching(TRUE, SimConfig(1000.0), np.random.default_rng(7))
    return res.catalog


@pytest.fixture(scope="session")
def medium_catalog():
    res = simulate_branching(TRUE, SimConfig(4000.0), np.random.default_rng(11))
    return res.catalog
