import numpy as np
import pytest

from poisson_ot.config_space import Density, poisson_space


@pytest.fixture(scope="session")
def ref1():
    """One site, ``m = 1``, cap 8."""
    return poisson_space([1.0], [8])


@pytest.fixture(scope="session")
def ref2():
    """Two sites with different intensities, caps ``(8, 8)``."""
    return poisson_space([1.0, 0.5], [8, 8])


@pytest.fixture(scope="session")
def ref_small2():
    return poisson_space([1.0, 1.0], [4, 3])


@pytest.fixture
def rng():
    return np.random.default_rng(20240611)


def positive(ref, seed, a=0.5, margin=2):
    return Density.exp_perturbed(ref, seed, a=a, margin=margin)


ACCEPTANCE_LINES: dict[int, str] = {}


@pytest.fixture
def criterion(request):
    """Record the one-line verdict of an acceptance criterion for the terminal summary."""

    def record(number: int, passed: bool, detail: str) -> bool:
        ACCEPTANCE_LINES[number] = f"criterion {number:2d}: {'PASS' if passed else 'FAIL'}  {detail}"
        return passed

    return record


def pytest_terminal_summary(terminalreporter):
    if not ACCEPTANCE_LINES:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(ACCEPTANCE_LINES):
        terminalreporter.write_line(ACCEPTANCE_LINES[n])
