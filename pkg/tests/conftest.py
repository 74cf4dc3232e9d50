import numpy as np
import pytest

from nftindex import synthetic


@pytest.fixture(scope="session")
def small_market():
    """A modest noisy market shared by read-only tests."""
    spec = synthetic.GeneratorSpec(
        n_collections=4,
        assets_per_collection=60,
        n_periods=30,
        gamma=synthetic.GammaPathSpec(kind="random_walk", vol=0.05),
        sigma_noise=0.2,
        seed=42,
        sales_law="fixed",
        sales_rate=25,
    )
    return synthetic.generate(spec)


@pytest.fixture(scope="session")
def noise_free_market():
    spec = synthetic.GeneratorSpec(
        n_collections=3,
        assets_per_collection=40,
        n_periods=20,
        gamma=synthetic.GammaPathSpec(kind="random_walk", vol=0.1),
        sigma_noise=0.0,
        seed=7,
        sales_law="fixed",
        sales_rate=15,
    )
    return synthetic.generate(spec)


def rng(seed=0):
    return np.random.default_rng(seed)
