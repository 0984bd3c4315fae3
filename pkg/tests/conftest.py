import sys
from pathlib import Path

import pytest

sys.path.insert(0, str(Path(__file__).parent))

from blochlab import builtin, solve_corrector, solve_second_corrector


@pytest.fixture(scope="session")
def model1d():
    return builtin("model1d")


@pytest.fixture(scope="session")
def cell1d(model1d):
    return solve_corrector(model1d.model, model1d.cutoff)


@pytest.fixture(scope="session")
def second1d(model1d, cell1d):
    return solve_second_corrector(model1d.model, cell1d)


@pytest.fixture(scope="session")
def hermitian2d():
    return builtin("acoustics2d_hermitian")


@pytest.fixture(scope="session")
def cell_hermitian(hermitian2d):
    return solve_corrector(hermitian2d.model, hermitian2d.cutoff)


@pytest.fixture(scope="session")
def weighted1d():
    return builtin("acoustics_weighted")


@pytest.fixture(scope="session")
def cell_weighted(weighted1d):
    return solve_corrector(weighted1d.model, weighted1d.cutoff)
