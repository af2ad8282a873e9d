import numpy as np
import pytest

from lowchurn import ScoringFunction


@pytest.fixture(params=["cross_entropy", "brier"])
def phi(request):
    return ScoringFunction(request.param)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
