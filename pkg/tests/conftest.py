import numpy as np
import pytest

from morphfit import geometry, synth


@pytest.fixture(scope="session")
def base_head():
    return synth.base_head()


@pytest.fixture(scope="session")
def head_consts(base_head):
    return geometry.default_unwarp_constants(base_head, 32, 32)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
