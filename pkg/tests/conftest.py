import numpy as np
import pytest

from meshinpaint import fixtures
from meshinpaint.mesh import Mesh


@pytest.fixture(scope="session")
def ico():
    return fixtures.icosahedron()


@pytest.fixture(scope="session")
def sphere3():
    return fixtures.icosphere(3)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def tetrahedron() -> Mesh:
    v = np.array([[0.0, 0, 0], [1, 0, 0], [0, 1, 0], [0, 0, 1]])
    f = np.array([[0, 2, 1], [0, 1, 3], [0, 3, 2], [1, 2, 3]])
    return Mesh(v, f)
