import numpy as np
import pytest

from mfgfem.fem import P1Space
from mfgfem.mesh import build_interval_mesh, build_rectangle_mesh


def pytest_addoption(parser):
    parser.addoption("--seed", type=int, default=0, help="seed for randomized property suites")


@pytest.fixture
def seed(request):
    return request.config.getoption("--seed")


@pytest.fixture
def rng(seed):
    return np.random.default_rng(seed)


@pytest.fixture
def space_1d():
    return P1Space(build_interval_mesh(0.0, 1.0, 16))


@pytest.fixture
def space_2d():
    return P1Space(build_rectangle_mesh(1.0, 1.0, 6, 6))


_ACCEPTANCE_LINES: list[str] = []


@pytest.fixture
def record_criterion():
    """Record one pass/fail line per acceptance criterion (printed in the summary)."""

    def record(name: str, passed: bool, detail: str) -> None:
        line = f"{name}: {'PASS' if passed else 'FAIL'} | {detail}"
        _ACCEPTANCE_LINES.append(line)
        print(line)

    return record


def pytest_terminal_summary(terminalreporter):
    if _ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in _ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
