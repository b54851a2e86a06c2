import numpy as np
import pytest

from robust_stackelberg.coupled import RobustParams
from robust_stackelberg.mesh import SpaceTimeField, make_grid, make_regions
from robust_stackelberg.pde import Potential

OMEGA = (0.1, 0.4)
O_REGION = (0.6, 0.9)
O_D = (0.3, 0.5)


def build(n_cells, n_steps, T=0.5):
    grid = make_grid(0.0, 1.0, n_cells, T, n_steps)
    return grid, make_regions(grid, OMEGA, O_REGION, O_D)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def small():
    return build(16, 16)


@pytest.fixture
def medium():
    return build(32, 32)


@pytest.fixture
def params():
    return RobustParams(10.0, 10.0)


def random_field(grid, rng, mask=None, scale=1.0):
    f = SpaceTimeField(grid, scale * rng.standard_normal(grid.shape))
    return f if mask is None else f.masked(mask)


def random_potential(grid, rng, scale=0.5):
    return Potential.from_field(SpaceTimeField(grid, scale * rng.standard_normal(grid.shape)))


def rel(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-300)


def sine(grid, k=1):
    return np.sin(k * np.pi * grid.x)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import ACCEPTANCE
    except ImportError:
        return
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for number in sorted(ACCEPTANCE):
            terminalreporter.write_line(ACCEPTANCE[number])
