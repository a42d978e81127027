import numpy as np
import pytest

from newtonsa.mixture import (
    MixingDensity,
    NormalLocation,
    Tabulated,
    ThetaGrid,
    atoms_on_grid,
    binomial_on_grid,
    quadrature_for,
)

ACCEPTANCE_LINES = {}


def record_criterion(number, passed, detail):
    """Store one acceptance line; printed at the end of the session."""
    line = f"criterion {number:>2}: {'PASS' if passed else 'FAIL'}  {detail}"
    ACCEPTANCE_LINES[number] = line
    print(line)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])


@pytest.fixture(scope="session")
def int_grid():
    return ThetaGrid.counting(np.arange(-4, 5, dtype=float))


@pytest.fixture(scope="session")
def normal1():
    return NormalLocation(1.0)


@pytest.fixture(scope="session")
def model_I(int_grid):
    return binomial_on_grid(int_grid, 8, 0.6)


@pytest.fixture(scope="session")
def model_II(int_grid):
    return atoms_on_grid(int_grid, {-2.0: 0.5, 2.0: 0.5})


@pytest.fixture(scope="session")
def quad_int(normal1, int_grid):
    return quadrature_for(normal1, int_grid)


@pytest.fixture(scope="session")
def two_point():
    """Theta = {-1, 1}, counting measure, sigma = 1."""
    g = ThetaGrid.counting([-1.0, 1.0])
    return g, NormalLocation(1.0), MixingDensity.uniform(g)


@pytest.fixture(scope="session")
def table_model():
    """Finite X = {0, 1}: p(0|theta_1) = 0.8, p(0|theta_2) = 0.3."""
    g = ThetaGrid.counting([1.0, 2.0])
    k = Tabulated([[0.8, 0.3], [0.2, 0.7]])
    return g, k, quadrature_for(k, g)
