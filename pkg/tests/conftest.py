import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from epsrecon.mesh import build_box_mesh, make_time_grid

settings.register_profile(
    "epsrecon", deadline=None, max_examples=25, suppress_health_check=[HealthCheck.too_slow]
)
settings.load_profile("epsrecon")


@pytest.fixture
def square2():
    """Unit square split into two triangles."""
    return build_box_mesh((0, 0), (1, 1), 1)


@pytest.fixture
def mesh4():
    return build_box_mesh((0, 0), (1, 1), 4)


@pytest.fixture
def grid8():
    return make_time_grid(1.0, 8)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


ACCEPTANCE_LINES = []


@pytest.fixture
def acceptance_report():
    """Record one PASS/FAIL line per acceptance criterion; printed in the terminal summary."""

    def report(number, name, ok, detail=""):
        line = f"criterion {number:2d} {'PASS' if ok else 'FAIL'}  {name}  {detail}".rstrip()
        ACCEPTANCE_LINES.append((number, line))
        print(line)
        return ok

    return report


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(line)
