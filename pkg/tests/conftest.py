import pytest

from measurepmp.measure import ParticleMeasure
from measurepmp.model import builtin_scalar_benchmark


@pytest.fixture
def bench():
    return builtin_scalar_benchmark()


@pytest.fixture
def delta2():
    return ParticleMeasure.dirac(2.0)


@pytest.fixture
def two_atoms():
    # 1/2 (delta_0 + delta_4)
    return ParticleMeasure([[0.0], [4.0]], [0.5, 0.5])
