import pytest

from linsys import kernels, lattice


@pytest.fixture(scope="session")
def bcpp3():
    return kernels.bcpp(3, 1.0)


@pytest.fixture(scope="session")
def bcpp3_m(bcpp3):
    return kernels.moments(bcpp3)


@pytest.fixture(scope="session")
def bcpp3_G(bcpp3_m):
    return lattice.green(bcpp3_m.k, 12, 128)


@pytest.fixture(scope="session")
def pot3():
    return kernels.potlatch([(0.5, 0.5), (1.5, 0.5)], lattice.srw_kernel(3))


@pytest.fixture(scope="session")
def pot3_m(pot3):
    return kernels.moments(pot3)


@pytest.fixture(scope="session")
def pot3_G(pot3_m):
    return lattice.green(pot3_m.k, 12, 128)


@pytest.fixture(scope="session")
def pot1():
    return kernels.potlatch([(0.5, 0.5), (1.5, 0.5)], lattice.srw_kernel(1))


@pytest.fixture(scope="session")
def trivial3():
    return kernels.custom(3, [(1.0, {(0, 0, 0): 1.0})])
