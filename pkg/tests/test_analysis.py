import csv
import json
import math

import numpy as np
import pytest

from ptstab.analysis import (ENVELOPE_SLACK, BenchTable, benchmark_speedup, decay_envelope_check,
                             epsilon_scaling, epsilon_star, estimate_C_vw, feedback_lipschitz,
                             lyapunov_V, practical_residual_bound, zeta)
from ptstab.backstepping_control import TARGET, StateVector
from ptstab.neural_operator import (FEEDBACK, MLP, Affine, lambda_sensor_layout, lambda_sensors,
                             make_feedback_operator, make_kernel_operator)
from ptstab.core_grid import CoeffSpec, DomainError, GainSchedule, SpaceGrid, TimeGrid, TriGrid
from ptstab.kernel_solver import DIRECT, INVERSE, KernelTrajectory
from ptstab.plant_sim import AnalyticKernel, OpenLoop, default_initial_state, simulate, transform_states


def test_lyapunov_V():
    g = SpaceGrid(101)
    assert lyapunov_V(StateVector(g, np.zeros(101), role=TARGET)) == 0.0
    assert lyapunov_V(StateVector(g, np.ones(101), role=TARGET)) == pytest.approx(0.5)
    assert lyapunov_V(StateVector(g, np.sin(np.pi * g.nodes), role=TARGET)) == pytest.approx(0.25, abs=1e-3)


def test_zeta():
    sched = GainSchedule.prescribed(8.0)
    assert zeta(sched, 0.0) == 1.0
    assert zeta(sched, 4.0) == pytest.approx(math.exp(-4.0))
    assert zeta(sched, 7.6) == pytest.approx(math.exp(-76.0))
    ts = np.linspace(0, 7.6, 500)
    assert np.all(np.diff(zeta(sched, ts)) < 0)
    with pytest.raises(DomainError):
        zeta(sched, 8.0)


def test_zeta_tabulated_matches_closed_form():
    sched = GainSchedule.prescribed(8.0)
    ts = np.linspace(0, 7.6, 4001)
    tab = GainSchedule.tabulated(ts, sched.c(ts), 8.0)
    assert zeta(tab, 4.0) == pytest.approx(math.exp(-4.0), rel=1e-5)


def inverse_traj(values):
    values = np.asarray(values, dtype=float)
    return KernelTrajectory(TriGrid(values.shape[-1]), np.arange(len(values), dtype=float), values, INVERSE)


def test_estimate_C_vw():
    assert estimate_C_vw(inverse_traj(np.zeros((2, 3, 3)))) == 1.0
    assert estimate_C_vw(inverse_traj(np.full((1, 3, 3), -2.0))) == 9.0
    a = estimate_C_vw(inverse_traj(np.full((1, 3, 3), 0.5)))
    b = estimate_C_vw(inverse_traj(np.full((1, 3, 3), 0.6)))
    assert b > a
    with pytest.raises(ValueError):
        estimate_C_vw(KernelTrajectory(TriGrid(3), [0.0], np.zeros((1, 3, 3)), DIRECT))


def test_C_vw_bounds_closed_loop_ratio(closed_loop, kernel_pair):
    ktraj, ltraj = kernel_pair
    C = estimate_C_vw(ltraj)
    dx = closed_loop.grid.dx
    w = transform_states(closed_loop.states, ktraj.values, dx)
    nv = np.sqrt(np.sum(closed_loop.states ** 2, axis=1))
    nw = np.sqrt(np.sum(w ** 2, axis=1))
    keep = nw > 1e-250
    assert np.max(nv[keep] / nw[keep]) <= math.sqrt(C)


def test_epsilon_star():
    tg = TimeGrid(0.1, 8.0, 0.4)
    ts = np.linspace(0, 8.0, 5)
    flat = GainSchedule.tabulated(ts, np.full(5, 1.0), 8.0)
    assert epsilon_star(flat, 1.0, 1.0, tg) == (0.0, True)
    three = GainSchedule.tabulated(ts, np.full(5, 3.0), 8.0)
    val, warn = epsilon_star(three, 1.0, 1.0, tg)
    assert val == pytest.approx(2.0) and not warn
    val, warn = epsilon_star(GainSchedule.prescribed(8.0), 1.0, 1.0, tg)
    assert val == 0.0 and warn
    with pytest.raises(ValueError):
        epsilon_star(three, 0.0, 1.0, tg)


def test_practical_residual_bound():
    assert practical_residual_bound(0.0, 8.0, 3.0) == 0.0
    assert practical_residual_bound(0.2, 8.0, 3.0) == pytest.approx(2 * practical_residual_bound(0.1, 8.0, 3.0))
    assert practical_residual_bound(0.1, 32.0, 3.0) == pytest.approx(2 * practical_residual_bound(0.1, 8.0, 3.0))
    with pytest.raises(ValueError):
        practical_residual_bound(-1.0, 8.0, 1.0)


def test_envelope_passes_for_exact_controller(closed_loop, kernel_pair, tmp_path):
    rep = decay_envelope_check(closed_loop, *kernel_pair, GainSchedule.prescribed(8.0))
    assert rep.passed and rep.slack == ENVELOPE_SLACK
    assert rep.terminal_ratio < 1e-20
    assert rep.zeta[-1] == pytest.approx(math.exp(-76.0))
    assert rep.eps_star == 0.0 and rep.eps_star_warning
    assert np.all(np.isfinite(rep.V))
    rep.write(tmp_path / "r.json", tmp_path / "r.csv", config_hash="h")
    summary = json.loads((tmp_path / "r.json").read_text())
    assert summary["passed"] is True
    rows = list(csv.reader((tmp_path / "r.csv").read_text().splitlines()[1:]))
    assert rows[0] == ["t", "V", "zeta", "w_norm", "v_norm", "w_envelope", "v_envelope"]
    assert len(rows) == len(rep.times) + 1


def test_envelope_flags_open_loop(scenario, kernel_pair):
    spec, sched, grid, tg = scenario
    traj = simulate(spec, sched, OpenLoop(), tg, default_initial_state(grid))
    rep = decay_envelope_check(traj, *kernel_pair, sched)
    assert not rep.passed and rep.blown_up


def test_envelope_rejects_inverse_kernel(closed_loop, kernel_pair):
    with pytest.raises(ValueError):
        decay_envelope_check(closed_loop, kernel_pair[1], kernel_pair[1], GainSchedule.prescribed(8.0))


def test_epsilon_scaling_slope(scenario, kernel_pair):
    spec, sched, grid, tg = scenario
    sweep = epsilon_scaling(spec, sched, AnalyticKernel(kernel_pair[0]), tg, default_initial_state(grid),
                            C=4.0)
    assert abs(sweep.slope - 1.0) < 0.3
    assert np.all(np.diff(sweep.terminal) > 0)
    assert np.allclose(sweep.bounds, 4.0 * math.sqrt(8.0) * sweep.eps)


def test_feedback_lipschitz_of_linear_map():
    op = make_feedback_operator(2, 3, 7.6, 0, hidden=(4,), p=1)
    op.branch = MLP([6, 1], [np.array([[0.0], [0.0], [1.0], [-2.0], [0.5], [0.0]])], [np.zeros(1)])
    op.trunk = MLP([1, 1], [np.zeros((1, 1))], [np.ones(1)])
    op.branch_norm = Affine.identity(6)
    op.trunk_norm = Affine.identity(1)
    op.sensors = {"t_max": 7.6, "n_v": 3}
    L = feedback_lipschitz(op, np.zeros(2), np.zeros((5, 3)), 1.0, 1e-3)
    # |a . d| <= ||a||_1 ||d||_inf = 3.5 ||d||_inf
    assert 0 < L <= 3.5 + 1e-9


def test_benchmark_table(tmp_path):
    op = make_kernel_operator(99, 7.6, 0, hidden=(8,), p=4)
    op.sensors = dict(lambda_sensor_layout(7.6), t_max=7.6, n=11)
    table = benchmark_speedup([0.1, 0.05], op, repetitions=1, dt=0.2, sweeps=1)
    assert [r[0] for r in table.rows] == [0.1, 0.05]
    for dx, a, s, sp in table.rows:
        assert a > 0 and s > 0 and sp == pytest.approx(a / s)
    assert table.environment["threads"] == 1
    path = table.write(tmp_path / "bench.csv", config_hash="h")
    lines = path.read_text().splitlines()
    assert lines[0] == "# config_hash=h" and lines[1] == "dx,analytic_s,surrogate_s,speedup"
    assert json.loads((tmp_path / "bench.env.json").read_text())["statistic"] == "median"
    with pytest.raises(ValueError):
        benchmark_speedup([0.1], op, repetitions=0)
