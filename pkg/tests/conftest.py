import numpy as np
import pytest

from nlbiharm import discretize, get_kernel, make_domain, rescale


@pytest.fixture(scope="session")
def tent1d():
    return get_kernel("tent", 1)


@pytest.fixture(scope="session")
def tent2d():
    return get_kernel("tent", 2)


@pytest.fixture(scope="session")
def domain64(tent1d):
    return make_domain(1, (0.0, 1.0), 64, tent1d, 0.2)


@pytest.fixture(scope="session")
def stencil64(tent1d, domain64):
    return discretize(rescale(tent1d, 0.2), domain64)


@pytest.fixture(scope="session")
def domain16(tent1d):
    return make_domain(1, (0.0, 1.0), 16, tent1d, 0.25)


@pytest.fixture(scope="session")
def stencil16(tent1d, domain16):
    return discretize(rescale(tent1d, 0.25), domain16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
