import numpy as np
import pytest

from bseelab.stochastic import TimeGrid, sample_brownian


@pytest.fixture
def grid():
    return TimeGrid(0.0, 1.0, 32)


@pytest.fixture
def noise(grid):
    return sample_brownian(11, 400, grid, d=1)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    try:
        from test_acceptance import LINES
    except ImportError:
        return
    if LINES:
        terminalreporter.section("acceptance criteria")
        for line in LINES:
            terminalreporter.write_line(line)
