"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import time

import numpy as np
import pytest

from ptstab import analysis
from ptstab.backstepping_control import StateVector, forward_transform, inverse_transform
from ptstab.cli import EXIT_OK, main
from ptstab.core_grid import CoeffSpec, GainSchedule, SpaceGrid, TimeGrid, TriGrid
from ptstab.dataset import load_dataset, sample_sigma
from ptstab.kernel_solver import (INVERSE, reciprocity_residual, solve_kernel_trajectory,
                                  solve_stationary_kernel)
from ptstab.neural_operator import (ALIGNED, PAIRED, Batch, DeepOperator, gradient_check,
                                    lambda_sensors, load_operator, predict_kernel_slices)
from ptstab.plant_sim import (AnalyticKernel, NOKernel, OpenLoop, default_initial_state, simulate,
                              target_residual)

from conftest import DT, MARGIN, SIGMA, T


@pytest.fixture(scope="module")
def reciprocity_pair():
    start = time.perf_counter()
    out = {}
    for n in (51, 101):
        grid = TriGrid(n)
        gam = np.full(n, 0.5)
        k = solve_stationary_kernel(gam, 1.0, 1.0, grid)
        l = solve_stationary_kernel(gam, 1.0, 1.0, grid, kind=INVERSE)
        out[n] = (k, l, reciprocity_residual(k, l))
    return out, time.perf_counter() - start


@pytest.fixture(scope="module")
def surrogate(tmp_path_factory):
    """Desk corpus of 200 sigma samples and a kernel operator trained with the CLI defaults."""
    root = tmp_path_factory.mktemp("desk")
    assert main(["gen-data", "--kind", "kernel", "--n", "200", "--seed", "0", "--out", str(root)]) == EXIT_OK
    ck = root / "kernel_op"
    assert main(["train", "--kind", "kernel", "--data", str(root / "kernel.manifest.json"),
                 "--seed", "0", "--out", str(ck)]) == EXIT_OK
    return load_operator(ck), load_dataset(root / "kernel.manifest.json")


def test_criterion_01_reciprocity(reciprocity_pair, verdict):
    res, seconds = reciprocity_pair
    r51, r101 = res[51][2], res[101][2]
    verdict(1, "kernel reciprocity", r101 < r51 and r101 < 1e-2 and seconds < 30,
            f"n=51 {r51:.3e}, n=101 {r101:.3e}, {seconds:.1f} s")


def test_criterion_02_round_trip(reciprocity_pair, verdict):
    k, l, _ = reciprocity_pair[0][101]
    x = k.grid.space.nodes
    worst = 0.0
    for values in (np.sin(np.pi * x) + x ** 2, 10.25 * x * (1 - x), np.cos(3 * x) - 0.5 * x):
        v = StateVector(k.grid.space, values)
        back = inverse_transform(forward_transform(v, k), l)
        worst = max(worst, float(np.max(np.abs(back.values - v.values))))
    verdict(2, "transform round trip", worst < 1e-2, f"max error {worst:.3e} at n=101")


def test_criterion_03_prescribed_time(scenario, verdict):
    spec, sched, grid, tg = scenario
    v0 = default_initial_state(grid)
    start = time.perf_counter()
    closed = simulate(spec, sched, AnalyticKernel(), tg, v0).terminal_ratio()
    norms = simulate(spec, sched, OpenLoop(), tg, v0).l2_norms()
    seconds = time.perf_counter() - start
    growth = float(norms.max() / norms[0])
    verdict(3, "prescribed-time stabilisation", closed <= 1e-2 and growth > 10 and seconds < 300,
            f"closed-loop terminal ratio {closed:.3e}, open-loop growth {growth:.3e}, {seconds:.1f} s")


def test_criterion_04_target_boundary(scenario, closed_loop, kernel_pair, verdict):
    rr = target_residual(closed_loop, kernel_pair[0], scenario[1], 1.0, 1.0)
    verdict(4, "target boundary condition", rr.max_boundary <= 1e-3 * rr.max_state_norm,
            f"max |w(1,t)| {rr.max_boundary:.3e}, max ||v|| {rr.max_state_norm:.3e}")


def test_criterion_05_surrogate_accuracy(surrogate, verdict):
    op, ds = surrogate
    grid = TriGrid(21)
    tg = TimeGrid(DT, T, MARGIN)
    idx = [int(round(5.0 / DT)), int(round(7.0 / DT))]
    sched = GainSchedule.prescribed(T)
    errors = []
    for sigma in sample_sigma(2024, 20):
        spec = CoeffSpec.chebyshev_blowup(float(sigma), T)
        exact = solve_kernel_trajectory(spec, sched, grid, tg, indices=idx)
        approx = predict_kernel_slices(op, lambda_sensors(spec, op.sensors), exact.times, grid)
        errors.append(grid.l2_norm(approx - exact.values))
    errors = np.array(errors)
    frac = float(np.mean(errors < 0.1))
    mse = op.info["final_train_mse"]
    ok = len(ds.inputs) >= 200 and frac >= 0.9 and mse < 1e-4 and op.info["epochs"] <= 600
    verdict(5, "surrogate kernel accuracy", ok,
            f"{frac:.0%} of 40 held-out errors < 0.1 (max t=5 {errors[:, 0].max():.3e}, "
            f"t=7 {errors[:, 1].max():.3e}), train MSE {mse:.3e} after {op.info['epochs']} epochs")


def test_criterion_06_surrogate_closed_loop(scenario, surrogate, verdict):
    spec, sched, grid, tg = scenario
    traj = simulate(spec, sched, NOKernel(surrogate[0]), tg, default_initial_state(grid))
    ratio = traj.terminal_ratio()
    verdict(6, "surrogate closed loop", not traj.blown_up and ratio <= 5e-2, f"terminal ratio {ratio:.3e}")


def test_criterion_07_epsilon_scaling(scenario, closed_loop, verdict):
    spec, sched, grid, tg = scenario
    sweep = analysis.epsilon_scaling(spec, sched, AnalyticKernel(), tg, default_initial_state(grid), seed=0)
    terms = ", ".join(f"{e:.0e}: {v:.3e}" for e, v in zip(sweep.eps, sweep.terminal))
    verdict(7, "epsilon scaling", abs(sweep.slope - 1.0) <= 0.3, f"slope {sweep.slope:.3f} ({terms})")


def test_criterion_08_speedup(surrogate, verdict):
    table = analysis.benchmark_speedup([0.01, 0.005], surrogate[0], repetitions=5)
    rows = np.array(table.rows)
    analytic, surr, speedup = rows[:, 1], rows[:, 2], rows[:, 3]
    spread = float(surr.max() / surr.min())
    ok = bool(np.all(np.diff(analytic) > 0)) and spread <= 3 and speedup[-1] >= 10
    verdict(8, "speedup scaling", ok,
            f"analytic {analytic[0]:.3f} s -> {analytic[1]:.3f} s, surrogate spread {spread:.2f}x, "
            f"speedup at dx=0.005 {speedup[-1]:.1f}x")


def test_criterion_09_gradient_oracle(verdict):
    worst = 0.0
    for seed in range(20):
        rng = np.random.default_rng(seed)
        layout = ALIGNED if seed % 2 else PAIRED
        op = DeepOperator.init(5, 2, seed, hidden=(6, 5), p=4, layout=layout)
        op.bias = rng.normal()
        u = rng.normal(size=(4, 5))
        if layout == ALIGNED:
            y, z = rng.uniform(size=(3, 2)), rng.normal(size=(4, 3))
        else:
            y, z = rng.uniform(size=(4, 2)), rng.normal(size=4)
        worst = max(worst, gradient_check(op, Batch(u, y, z, layout)))
    verdict(9, "gradient oracle", worst < 1e-5, f"max relative error {worst:.3e} over 20 instances")


def _files(path):
    return {p.name: p.read_bytes() for p in sorted(path.iterdir())}


def test_criterion_10_determinism(tmp_path, verdict):
    runs = []
    for name in ("a", "b"):
        root = tmp_path / name
        data, ck, sim = root / "data", root / "ck", root / "sim"
        assert main(["gen-data", "--kind", "kernel", "--n", "6", "--n-times", "5", "--dx", "0.1",
                     "--dt", "0.01", "--seed", "11", "--out", str(data)]) == EXIT_OK
        ck.mkdir()
        assert main(["train", "--kind", "kernel", "--data", str(data / "kernel.manifest.json"),
                     "--epochs", "5", "--seed", "11", "--out", str(ck / "op")]) == EXIT_OK
        assert main(["simulate", "--controller", "perturbed", "--eps", "0.01", "--dx", "0.1",
                     "--dt", "0.005", "--seed", "11", "--out", str(sim)]) == EXIT_OK
        runs.append([_files(data), _files(ck), _files(sim)])
    same = [x == y for x, y in zip(*runs)]
    verdict(10, "determinism", all(same),
            f"identical reruns: gen-data {same[0]}, train {same[1]}, simulate {same[2]}")
