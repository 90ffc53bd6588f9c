import numpy as np
import pytest

from adom_affine.graphs import random_ring_source
from adom_affine.problems import build_dual, make_problem


@pytest.fixture(scope="session")
def small_problem():
    return make_problem(5, 4, 2, 1.0, 10.0, 20.0, seed=0)


@pytest.fixture(scope="session")
def small_dual(small_problem):
    return build_dual(small_problem, random_ring_source(5, seed=0))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


_ACCEPTANCE = []


@pytest.fixture
def acceptance(request):
    """Record ``(criterion, ok, detail)``; lines are echoed and collected for the summary."""

    def report(number, title, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {title}  {detail}".rstrip()
        print(line)
        _ACCEPTANCE.append((number, line))
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for _, line in sorted(_ACCEPTANCE):
        terminalreporter.write_line(line)
