"""Lyapunov diagnostics, decay envelopes, stability constants and benchmarks."""
from __future__ import annotations

import csv
import json
import os
import platform
import statistics
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, NamedTuple

import numpy as np
from threadpoolctl import threadpool_limits

from .backstepping_control import StateVector
from .neural_operator import DeepOperator, lambda_sensors, predict_feedback, predict_kernel_slices
from .core_grid import CoeffSpec, GainSchedule, TimeGrid, TriGrid, trapezoid
from .kernel_solver import DIRECT, INVERSE, KernelTrajectory, solve_kernel_trajectory
from .plant_sim import Controller, PerturbedExact, Trajectory, simulate, transform_states

ENVELOPE_SLACK = 1.5


def lyapunov_V(w: StateVector) -> float:
    """V = 1/2 int_0^1 w^2 dx."""
    return 0.5 * float(trapezoid(w.values ** 2, w.grid.dx))


def zeta(sched: GainSchedule, t):
    """exp(-2 int_0^t c)."""
    return np.exp(-2.0 * sched.integral(t))


def estimate_C_vw(ltraj: KernelTrajectory) -> float:
    """(1 + sup_t ||l||_inf)^2."""
    if ltraj.kind != INVERSE:
        raise ValueError("C_vw needs the inverse kernel trajectory")
    return (1.0 + ltraj.sup_norm()) ** 2


class EpsilonStar(NamedTuple):
    value: float
    warning: bool


def epsilon_star(sched: GainSchedule, theta: float, C: float, tg: TimeGrid) -> EpsilonStar:
    """inf_t sqrt(max(0, 2 (c(t) - theta) / (C theta))) over the time grid.

    ``warning`` is set when c(t) <= theta somewhere, which drives the value to 0.
    """
    if not C > 0 or not theta > 0:
        raise ValueError("C and theta must be positive")
    c = sched.c(tg.times)
    arg = 2.0 * (c - theta) / (C * theta)
    return EpsilonStar(float(np.sqrt(np.max([0.0, arg.min()]))), bool(np.any(c <= theta)))


def practical_residual_bound(eps_hat: float, T: float, C: float) -> float:
    """C sqrt(T) eps."""
    if eps_hat < 0 or T < 0 or C < 0:
        raise ValueError("inputs must be nonnegative")
    return C * np.sqrt(T) * eps_hat


# ---------------------------------------------------------------------------
# envelope check


@dataclass
class StabilityReport:
    times: np.ndarray
    V: np.ndarray
    zeta: np.ndarray
    w_norm: np.ndarray
    v_norm: np.ndarray
    w_envelope: np.ndarray
    v_envelope: np.ndarray
    C_vw: float
    eps_hat: float
    eps_star: float
    eps_star_warning: bool
    terminal_norm: float
    terminal_ratio: float
    slack: float
    w_pass: bool
    v_pass: bool
    blown_up: bool = False
    extra: dict[str, Any] = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.w_pass and self.v_pass

    def summary(self) -> dict[str, Any]:
        return {
            "C_vw": self.C_vw, "eps_hat": self.eps_hat, "eps_star": self.eps_star,
            "eps_star_warning": self.eps_star_warning, "terminal_norm": self.terminal_norm,
            "terminal_ratio": self.terminal_ratio, "envelope_slack": self.slack,
            "w_envelope_pass": self.w_pass, "v_envelope_pass": self.v_pass,
            "passed": self.passed, "blown_up": self.blown_up, **self.extra,
        }

    def write(self, json_path, csv_path=None, config_hash: str | None = None):
        Path(json_path).write_text(json.dumps(self.summary(), indent=1, sort_keys=True))
        if csv_path is not None:
            with Path(csv_path).open("w", newline="") as fh:
                if config_hash is not None:
                    fh.write(f"# config_hash={config_hash}\n")
                wr = csv.writer(fh, lineterminator="\n")
                wr.writerow(["t", "V", "zeta", "w_norm", "v_norm", "w_envelope", "v_envelope"])
                for row in zip(self.times, self.V, self.zeta, self.w_norm, self.v_norm,
                               self.w_envelope, self.v_envelope):
                    wr.writerow([repr(float(x)) for x in row])


def decay_envelope_check(traj: Trajectory, ktraj: KernelTrajectory, ltraj: KernelTrajectory,
                         sched: GainSchedule, eps_hat: float = 0.0,
                         slack: float = ENVELOPE_SLACK) -> StabilityReport:
    """Compare measured ||w||, ||v|| with the prescribed-time envelopes.

    ||w(t)|| <= sqrt(zeta(t)) exp((theta eps^2 C + 2 theta) t / 2) ||w0||
    ||v(t)|| <= sqrt(C) (1 + ||k(., ., 0)||_inf) * (same factor) * ||v0||
    Pass iff measured <= slack * envelope at every stored time.
    """
    if ktraj.kind != DIRECT:
        raise ValueError("ktraj must be a direct kernel trajectory")
    theta = float(traj.meta.get("theta", 1.0))
    dt = float(traj.meta["dt"])
    idx = np.rint(ktraj.times / dt).astype(int)
    keep = idx < len(traj)
    idx, kvals, times = idx[keep], ktraj.values[keep], ktraj.times[keep]
    dx = traj.grid.dx
    v = traj.states[idx]
    w = transform_states(v, kvals, dx)
    w_norm = np.sqrt(trapezoid(w ** 2, dx, axis=-1))
    v_norm = np.sqrt(trapezoid(v ** 2, dx, axis=-1))
    C = estimate_C_vw(ltraj)
    z = zeta(sched, times)
    with np.errstate(over="ignore"):  # a large eps_hat makes the bound vacuous
        growth = np.exp((theta * eps_hat ** 2 * C + 2.0 * theta) * times / 2.0)
    w_env = np.sqrt(z) * growth * w_norm[0]
    k0 = float(np.max(np.abs(ktraj.values[0])))
    v_env = np.sqrt(C) * (1.0 + k0) * np.sqrt(z) * growth * v_norm[0]
    es = epsilon_star(sched, theta, C, TimeGrid(dt, traj.meta["T"], traj.meta["margin"]))
    norms = traj.l2_norms()
    return StabilityReport(
        times=times, V=0.5 * w_norm ** 2, zeta=z, w_norm=w_norm, v_norm=v_norm,
        w_envelope=w_env, v_envelope=v_env, C_vw=C, eps_hat=eps_hat,
        eps_star=es.value, eps_star_warning=es.warning,
        terminal_norm=float(norms[-1]), terminal_ratio=float(norms[-1] / norms[0]),
        slack=slack, w_pass=bool(np.all(w_norm <= slack * w_env)),
        v_pass=bool(np.all(v_norm <= slack * v_env)), blown_up=traj.blown_up)


# ---------------------------------------------------------------------------
# perturbation and surrogate probes


@dataclass
class EpsilonSweep:
    eps: np.ndarray
    terminal: np.ndarray
    slope: float
    bounds: np.ndarray


def epsilon_scaling(spec: CoeffSpec, sched: GainSchedule, base: Controller, tg: TimeGrid,
                    v0: StateVector, eps_values=(1e-3, 1e-2, 1e-1), seed: int = 0,
                    C: float | None = None) -> EpsilonSweep:
    """Terminal ||v|| under injected control errors and its log-log slope in eps."""
    eps = np.asarray(eps_values, dtype=float)
    term = np.array([simulate(spec, sched, PerturbedExact(base, e, seed), tg, v0).l2_norms()[-1]
                     for e in eps])
    slope = float(np.polyfit(np.log(eps), np.log(term), 1)[0])
    bounds = np.array([practical_residual_bound(e, tg.T, C) for e in eps]) if C else np.full(len(eps), np.nan)
    return EpsilonSweep(eps, term, slope, bounds)


def feedback_lipschitz(op: DeepOperator, sensors, states: np.ndarray, times, delta: float,
                       seed: int = 0) -> float:
    """Largest |G(v + d) - G(v)| / ||d||_inf over random perturbations with ||d||_inf = delta."""
    rng = np.random.default_rng(seed)
    states = np.atleast_2d(states)
    d = rng.uniform(-1.0, 1.0, size=states.shape)
    d *= delta / np.max(np.abs(d), axis=1, keepdims=True)
    times = np.broadcast_to(np.asarray(times, dtype=float), (len(states),))
    ratio = 0.0
    for v, dv, t in zip(states, d, times):
        a = predict_feedback(op, sensors, v, t)
        b = predict_feedback(op, sensors, v + dv, t)
        ratio = max(ratio, abs(b - a) / delta)
    return ratio


# ---------------------------------------------------------------------------
# benchmark


@dataclass
class BenchTable:
    rows: list[tuple[float, float, float, float]]
    environment: dict[str, Any]

    def write(self, path, config_hash: str | None = None) -> Path:
        path = Path(path)
        with path.open("w", newline="") as fh:
            if config_hash is not None:
                fh.write(f"# config_hash={config_hash}\n")
            wr = csv.writer(fh, lineterminator="\n")
            wr.writerow(["dx", "analytic_s", "surrogate_s", "speedup"])
            for row in self.rows:
                wr.writerow([repr(float(x)) for x in row])
        path.with_suffix(".env.json").write_text(json.dumps(self.environment, indent=1, sort_keys=True))
        return path


def environment_descriptor() -> dict[str, Any]:
    return {
        "platform": platform.platform(), "python": platform.python_version(),
        "numpy": np.__version__, "processor": platform.processor() or platform.machine(),
        "logical_cpus": os.cpu_count(), "threads": 1,
        "clock": "time.perf_counter", "statistic": "median",
    }


def _median_time(fn, repetitions: int) -> float:
    fn()  # warm-up
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        fn()
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples)


def benchmark_speedup(dx_values, op: DeepOperator, repetitions: int = 5, sigma: float = 3.3,
                      T: float = 8.0, margin: float = 0.4, dt: float = 0.05,
                      sweeps: int = 6) -> BenchTable:
    """Median wall time of an analytic kernel trajectory at each dx versus the surrogate.

    Both sides produce the kernel on the same time slices of a grid with step
    ``dt``.  The surrogate is queried on its own training lattice, so its cost
    does not depend on dx.
    """
    if repetitions < 1:
        raise ValueError("repetitions must be >= 1")
    spec = CoeffSpec.chebyshev_blowup(sigma, T)
    sched = GainSchedule.prescribed(T)
    tg = TimeGrid(dt, T, margin)
    sensors = lambda_sensors(spec, op.sensors)
    native = TriGrid(int(op.sensors.get("n", 21)))
    rows = []
    with threadpool_limits(limits=1):
        for dx in dx_values:
            surrogate = _median_time(lambda: predict_kernel_slices(op, sensors, tg.times, native),
                                     repetitions)
            grid = TriGrid(int(round(1.0 / dx)) + 1)
            analytic = _median_time(lambda: solve_kernel_trajectory(spec, sched, grid, tg, sweeps=sweeps),
                                    repetitions)
            rows.append((float(dx), analytic, surrogate, analytic / surrogate))
    env = environment_descriptor()
    env.update({"repetitions": repetitions, "sigma": sigma, "dt": dt, "slices": tg.n_steps + 1,
                "surrogate_grid_n": native.n})
    return BenchTable(rows, env)
