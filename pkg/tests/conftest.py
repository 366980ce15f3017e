import numpy as np
import pytest

from weakbohm.propagation import Hamiltonian, Potential, PropagatorConfig
from weakbohm.wavefield import Grid, gaussian


@pytest.fixture
def grid1d():
    return Grid.regular(-20.0, 20.0, 128)


@pytest.fixture
def free():
    return Hamiltonian()


@pytest.fixture
def harmonic():
    return Hamiltonian(potential=Potential.harmonic(1.0))


@pytest.fixture
def packet(grid1d):
    return gaussian(grid1d, -4.0, 1.0, 1.0)


@pytest.fixture
def cfg():
    return PropagatorConfig(0.0025)


def free_width(s0, t, hbar=1.0, m=1.0):
    """Position spread of a free Gaussian with initial spread ``s0``."""
    return s0 * np.sqrt(1 + (hbar * t / (2 * m * s0 ** 2)) ** 2)


# one line per acceptance criterion, repeated in the terminal summary
ACCEPTANCE: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in sorted(ACCEPTANCE, key=lambda s: int(s.split()[2].rstrip(":"))):
            terminalreporter.write_line(line)
