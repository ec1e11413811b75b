import numpy as np
import pytest

from wvlab.grid import SpatialGrid, TimeAxis


@pytest.fixture
def small():
    """A coarse grid/axis pair for fast unit tests."""
    return SpatialGrid(17), TimeAxis(1.0, 16)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)
