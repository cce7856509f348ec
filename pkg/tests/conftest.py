import numpy as np
import pytest

from qfbsde.paths import MartingaleModel, TimeGrid, generate_paths

# lines collected by the acceptance suite, echoed in the terminal summary
ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE_LINES, key=lambda s: int(s.split()[1].rstrip(":"))):
            terminalreporter.write_line(line)


@pytest.fixture
def brownian_bundle():
    grid = TimeGrid.uniform(1.0, 50)
    return generate_paths(MartingaleModel(), grid, 4000, 123)


@pytest.fixture
def rng():
    return np.random.default_rng(7)
