import math

import pytest

from boundtrap.model import feedback_system
from boundtrap.scatter import TrapSolver


@pytest.fixture(scope="session")
def single():
    """One emitter, gamma t_d = 2, omega_0 t_d = pi."""
    return feedback_system(math.pi / 2, 1.0, 2.0)


@pytest.fixture(scope="session")
def pair():
    """Two degenerate emitters at omega_0 = 2 pi with delays 0.5 and 1."""
    return feedback_system(2 * math.pi, 1.0, [0.5, 1.0])


@pytest.fixture(scope="session")
def single_solver(single):
    return TrapSolver.build(single)


@pytest.fixture(scope="session")
def pair_solver(pair):
    return TrapSolver.build(pair)


_ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture(scope="session")
def acceptance_lines(request):
    return request.config.stash.setdefault(_ACCEPTANCE, [])


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(_ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines, key=lambda s: int(s.split("criterion")[1].split()[0])):
            terminalreporter.write_line(line)
