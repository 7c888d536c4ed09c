import numpy as np
import pytest

from eigenfield import primitives
from eigenfield.spectrum import compute_basis


@pytest.fixture(scope="session")
def sphere2():
    return primitives.icosphere(subdivisions=2)


@pytest.fixture(scope="session")
def sphere3():
    return primitives.icosphere(subdivisions=3)


@pytest.fixture(scope="session")
def sphere3_basis16(sphere3):
    return compute_basis(sphere3, 16, seed=0)


@pytest.fixture(scope="session")
def circle256():
    return primitives.uniform_circle(n=256)


@pytest.fixture
def rng():
    return np.random.default_rng(0)
