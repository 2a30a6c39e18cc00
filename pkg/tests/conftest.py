import numpy as np
import pytest

from snapforge.harness import BenchConfig, generate_problem
from snapforge.snap_core import Problem, SnapParams

# acceptance criteria report their verdicts here; printed in the terminal summary
ACCEPTANCE_LINES: dict[int, str] = {}


def synthetic_problem(natoms, nnbor, twojmax, seed=0, rcut=4.0):
    cfg = BenchConfig(natoms=natoms, nnbor=nnbor, twojmax=twojmax, rcut=rcut, seed=seed)
    return generate_problem(cfg)


def physical_problem(natoms, twojmax, seed=0, nnbor=2, rcut=1.0):
    cfg = BenchConfig(natoms=natoms, nnbor=nnbor, twojmax=twojmax, rcut=rcut, seed=seed,
                      synthetic=False)
    return generate_problem(cfg)


def pair_problem(disp, twojmax=2, rcut=1.0, beta=None, **kw):
    """Two atoms that see each other; atom 1 sees atom 0 at ``-disp``."""
    disp = np.asarray(disp, dtype=float)
    nb = {0: 1, 2: 5, 4: 14, 8: 55}.get(twojmax)
    if beta is None:
        beta = np.random.default_rng(7).uniform(-1, 1, nb)
    params = SnapParams(twojmax=twojmax, rcut=rcut, beta=beta, **kw)
    return Problem.from_lists(np.array([[0, 0, 0], disp]), [[1], [0]], [[disp], [-disp]],
                              params)


@pytest.fixture(scope="session")
def small_physical():
    return physical_problem(8, 4, seed=3)


@pytest.fixture(scope="session")
def synth32_j8():
    return synthetic_problem(32, 12, 8, seed=5)


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
