import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from cfmlab.data import make_synthetic
from cfmlab.models import ARCHS, TrainConfig, build_model, train

settings.register_profile(
    "default", deadline=None, max_examples=60, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("default")


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(scope="session")
def small_zoo():
    """Four briefly trained models on 16x16 synthetic data, shared by the whole session."""
    tr = make_synthetic(10, 60, seed=11)
    zoo = {}
    for i, arch in enumerate(ARCHS):
        m = build_model(arch, (3, 16, 16), 10, seed=50 + i)
        train(m, tr, TrainConfig(epochs=4, learning_rate=0.02, seed=50 + i))
        zoo[arch] = m
    return zoo
