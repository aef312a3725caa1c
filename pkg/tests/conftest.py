import numpy as np
import pytest

from ptstab.core_grid import CoeffSpec, GainSchedule, SpaceGrid, TimeGrid, TriGrid
from ptstab.kernel_solver import solve_inverse_kernel_trajectory, solve_kernel_trajectory
from ptstab.plant_sim import AnalyticKernel, default_initial_state, simulate

SIGMA = 3.3
T = 8.0
MARGIN = 0.4
DT = 6.25e-4


@pytest.fixture(scope="session")
def scenario():
    spec = CoeffSpec.chebyshev_blowup(SIGMA, T)
    sched = GainSchedule.prescribed(T)
    return spec, sched, SpaceGrid(21), TimeGrid(DT, T, MARGIN)


@pytest.fixture(scope="session")
def kernel_pair(scenario):
    spec, sched, grid, tg = scenario
    tri = TriGrid(grid.n)
    return (solve_kernel_trajectory(spec, sched, tri, tg),
            solve_inverse_kernel_trajectory(spec, sched, tri, tg))


@pytest.fixture(scope="session")
def closed_loop(scenario, kernel_pair):
    spec, sched, grid, tg = scenario
    ctrl = AnalyticKernel(kernel_pair[0])
    return simulate(spec, sched, ctrl, tg, default_initial_state(grid))


ACCEPTANCE = []


@pytest.fixture(scope="session")
def verdict():
    """Record one PASS/FAIL line per acceptance criterion, then assert it."""
    def record(number, title, ok, detail):
        line = f"{'PASS' if ok else 'FAIL'} criterion {number:2d} {title}: {detail}"
        ACCEPTANCE.append((number, line))
        print(line)
        assert ok, line
    return record


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(ACCEPTANCE):
            terminalreporter.write_line(line)
