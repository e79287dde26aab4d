import numpy as np
import pytest

from stratsim.benchmarks.toy import make_toy_model, toy_oracle


@pytest.fixture(scope="session")
def toy():
    return make_toy_model()


@pytest.fixture(scope="session")
def toy_pf():
    return toy_oracle(1500.0)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)
