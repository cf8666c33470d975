import numpy as np
import pytest

from wkam.core import CouplingMatrix, HamiltonianSpec, quadratic_spec
from wkam.grid import PeriodicGrid


class ConcaveSpec(HamiltonianSpec):
    """H = -|p|^2/2 - f; only for probing the checkers."""

    @property
    def coordinatewise_monotone(self):
        return False

    def kinetic(self, p, i):
        return -0.5 * np.sum(np.asarray(p, dtype=float) ** 2, axis=-1)

    def kinetic_grad(self, p, i):
        return -np.asarray(p, dtype=float)

    def kinetic_hessian(self, p, i):
        p = np.asarray(p, dtype=float)
        return -np.broadcast_to(np.eye(self.d), p.shape + (self.d,)).copy()


@pytest.fixture
def single_well():
    return quadratic_spec("sin(pi*x)**2", 1, 2)


@pytest.fixture
def double_well():
    return quadratic_spec("sin(2*pi*x)**2", 1, 2)


@pytest.fixture
def c2():
    return CouplingMatrix.uniform(2, 1.0)


@pytest.fixture
def grid64():
    return PeriodicGrid(1, 64, 2)


def pytest_terminal_summary(terminalreporter):
    mod = __import__("sys").modules.get("test_acceptance")
    lines = getattr(mod, "ACCEPTANCE_LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
