import hypothesis
import numpy as np
import pytest

from dkpet.projector import SystemModel, default_geometry

hypothesis.settings.register_profile("default", max_examples=40, deadline=None)
hypothesis.settings.load_profile("default")


@pytest.fixture(scope="session")
def model32():
    return SystemModel(default_geometry(32, 2.0, n_angles=60), (32, 32), 2.0)


@pytest.fixture(scope="session")
def small_model():
    return SystemModel(default_geometry(8, 1.0, n_angles=12), (8, 8), 1.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
