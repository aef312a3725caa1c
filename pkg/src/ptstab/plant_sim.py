"""Heat plant v_t = theta v_xx + lambda v, v_x(0) = q v(0), v(1) = U(t).

Controllers that are linear in the state (kernel feedback) are applied
implicitly: the new state is va + U vb, where va solves the step with U = 0
and vb the homogeneous step with U = 1, and U is chosen so that the feedback
law holds at the new time.  This makes the target boundary condition exact
up to round-off rather than lagging one step.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np
from scipy.linalg import LinAlgError, solve_banded

from .backstepping_control import StateVector, volterra_weights
from .neural_operator import (DeepOperator, lambda_sensors,
                       predict_feedback, predict_gain_rows)
from .core_grid import (CoeffSpec, GainSchedule, NumericError, SpaceGrid, TimeGrid,
                   TriGrid, trapezoid, trapezoid_weights)
from .kernel_solver import KernelTrajectory, solve_kernel_trajectory

BLOWUP_THRESHOLD = 1e9


def default_initial_state(grid: SpaceGrid, amplitude: float = 10.25) -> StateVector:
    x = grid.nodes
    return StateVector(grid, amplitude * x * (1.0 - x), 0.0)


# ---------------------------------------------------------------------------
# Crank-Nicolson step


def _cn_system(v, lam_now, lam_next, theta, q, dt, dx):
    """Tridiagonal CN system; the last row is left for the Dirichlet value."""
    n = v.shape[-1]
    N = n - 1
    s = theta * dt / (2 * dx * dx)
    lo = np.zeros(n)
    di = np.ones(n)
    up = np.zeros(n)
    rhs = np.zeros(v.shape)
    i = np.arange(1, N)
    lo[i] = -s
    di[i] = 1 + 2 * s - 0.5 * dt * lam_next[i]
    up[i] = -s
    rhs[..., i] = (v[..., i] + s * (v[..., i + 1] - 2 * v[..., i] + v[..., i - 1])
                   + 0.5 * dt * lam_now[i] * v[..., i])
    # Robin row -(3 + 2 q dx) v0 + 4 v1 - v2 = 0, v2 eliminated with row 1
    if n >= 3:
        f = -1.0 / up[1]
        di[0] = -(3 + 2 * q * dx) - f * lo[1]
        up[0] = 4.0 - f * di[1]
        rhs[..., 0] = -f * rhs[..., 1]
    else:
        di[0] = -(1 + q * dx)
        up[0] = 1.0
    return lo, di, up, rhs


def _solve(lo, di, up, rhs):
    ab = np.zeros((3, len(di)))
    ab[0, 1:] = up[:-1]
    ab[1] = di
    ab[2, :-1] = lo[1:]
    try:
        out = solve_banded((1, 1), ab, rhs, check_finite=False)
    except (LinAlgError, ValueError) as exc:
        raise NumericError(f"plant step system is singular: {exc}") from exc
    if not np.all(np.isfinite(out)):
        raise NumericError("plant step produced non-finite values")
    return out


def _step_pair(v, lam_now, lam_next, theta, q, dt, dx):
    """(va, vb): step from v with U = 0, and homogeneous step with U = 1."""
    lo, di, up, rhs = _cn_system(v, lam_now, lam_next, theta, q, dt, dx)
    rhs2 = np.zeros((len(v), 2))
    rhs2[:, 0] = rhs
    rhs2[-1, 1] = 1.0
    sol = _solve(lo, di, up, rhs2)
    return sol[:, 0], sol[:, 1]


def step_plant(v: StateVector, lam_now, lam_next, theta: float, q: float,
               U_next: float, dt: float) -> StateVector:
    """One Crank-Nicolson step with diffusion and reaction implicit."""
    if not dt > 0:
        raise ValueError("dt must be positive")
    lam_now = np.asarray(lam_now, dtype=float)
    lam_next = np.asarray(lam_next, dtype=float)
    if lam_now.shape != v.values.shape or lam_next.shape != v.values.shape:
        raise ValueError("coefficient samples must match the state grid")
    lo, di, up, rhs = _cn_system(v.values, lam_now, lam_next, theta, q, dt, v.grid.dx)
    rhs[-1] = U_next
    out = _solve(lo, di, up, rhs)
    return StateVector(v.grid, out, v.t + dt)


# ---------------------------------------------------------------------------
# controllers


class Policy:
    """Per-run controller state: U_{m+1} = (gain . v_{m+1}) + offset."""

    def gain(self, m: int) -> np.ndarray | None:
        return None

    def offset(self, m: int, v: np.ndarray, va: np.ndarray, vb: np.ndarray, t_next: float) -> float:
        return 0.0


class Controller:
    name = "controller"

    def bind(self, spec: CoeffSpec, sched: GainSchedule, tg: TimeGrid, grid: SpaceGrid) -> Policy:
        raise NotImplementedError


class OpenLoop(Controller):
    name = "open-loop"

    def bind(self, spec, sched, tg, grid):
        return Policy()


class _GainPolicy(Policy):
    def __init__(self, rows):
        self.rows = rows

    def gain(self, m):
        return self.rows[m + 1]


class AnalyticKernel(Controller):
    """Exact kernel feedback; solves the kernel trajectory on bind if none is given."""

    name = "analytic"

    def __init__(self, ktraj: KernelTrajectory | None = None, sweeps: int = 6):
        self.ktraj = ktraj
        self.sweeps = sweeps

    def bind(self, spec, sched, tg, grid):
        ktraj = self.ktraj
        if ktraj is None:
            ktraj = solve_kernel_trajectory(spec, sched, TriGrid(grid.n), tg, sweeps=self.sweeps)
            self.ktraj = ktraj
        if ktraj.grid.n != grid.n:
            raise ValueError("kernel trajectory resolution differs from the state grid")
        if len(ktraj) != tg.n_steps + 1 or not np.allclose(ktraj.times, tg.times, atol=1e-9):
            raise ValueError("kernel trajectory does not cover the simulation time grid")
        return _GainPolicy(ktraj.gain_rows())


class NOKernel(Controller):
    """Feedback with the surrogate kernel k_hat(1, y, t)."""

    name = "no-kernel"

    def __init__(self, op: DeepOperator):
        self.op = op

    def bind(self, spec, sched, tg, grid):
        sensors = lambda_sensors(spec, self.op.sensors)
        return _GainPolicy(predict_gain_rows(self.op, sensors, tg.times, grid.n))


class _FeedbackPolicy(Policy):
    def __init__(self, op, sensors, grid):
        self.op = op
        self.sensors = sensors
        self.x = grid.nodes
        self.xs = np.linspace(0.0, 1.0, int(op.sensors["n_v"]))

    def offset(self, m, v, va, vb, t_next):
        # U = G(va + U vb); the map is close to linear in v, so one secant
        # step on the two probes U = 0 and U = 1 resolves the implicit equation
        probes = np.stack([np.interp(self.xs, self.x, va), np.interp(self.xs, self.x, va + vb)])
        g0, g1 = predict_feedback(self.op, self.sensors, probes, t_next)
        slope = g1 - g0
        if abs(1.0 - slope) < 1e-6:
            return float(g0)
        return float(g0 / (1.0 - slope))


class NOFeedback(Controller):
    """Surrogate of the whole feedback map (lambda, v, t) -> U."""

    name = "no-feedback"

    def __init__(self, op: DeepOperator):
        self.op = op

    def bind(self, spec, sched, tg, grid):
        return _FeedbackPolicy(self.op, lambda_sensors(spec, self.op.sensors), grid)


class _PerturbedPolicy(Policy):
    def __init__(self, base: Policy, eps: float, seed: int):
        self.base = base
        self.eps = eps
        self.rng = np.random.default_rng(seed)

    def gain(self, m):
        return self.base.gain(m)

    def offset(self, m, v, va, vb, t_next):
        off = self.base.offset(m, v, va, vb, t_next)
        if self.eps > 0:
            off += self.rng.uniform(-self.eps, self.eps)
        return off


class PerturbedExact(Controller):
    """Base controller plus a seeded uniform disturbance in [-eps, eps] on U."""

    name = "perturbed"

    def __init__(self, base: Controller, eps: float, seed: int = 0):
        if eps < 0:
            raise ValueError("eps must be nonnegative")
        self.base = base
        self.eps = eps
        self.seed = seed

    def bind(self, spec, sched, tg, grid):
        return _PerturbedPolicy(self.base.bind(spec, sched, tg, grid), self.eps, self.seed)


# ---------------------------------------------------------------------------
# simulation


@dataclass
class Trajectory:
    grid: SpaceGrid
    times: np.ndarray
    states: np.ndarray
    controls: np.ndarray
    blown_up: bool = False
    meta: dict[str, Any] = field(default_factory=dict)

    def __len__(self):
        return len(self.times)

    def state(self, m: int) -> StateVector:
        return StateVector(self.grid, self.states[m], float(self.times[m]))

    def l2_norms(self) -> np.ndarray:
        return np.sqrt(trapezoid(self.states ** 2, self.grid.dx, axis=-1))

    def terminal_ratio(self) -> float:
        norms = self.l2_norms()
        return float(norms[-1] / norms[0]) if norms[0] > 0 else float(norms[-1])


def simulate(spec: CoeffSpec, sched: GainSchedule, ctrl: Controller, tg: TimeGrid,
             v0: StateVector) -> Trajectory:
    grid = v0.grid
    n = grid.n
    dx = grid.dx
    theta, q = spec.theta, spec.q
    times = tg.times
    lam = spec.lam(grid.nodes[None, :], times[:, None])
    policy = ctrl.bind(spec, sched, tg, grid)
    w = trapezoid_weights(n, dx)
    states = np.zeros((len(times), n))
    controls = np.zeros(len(times))
    states[0] = v0.values
    controls[0] = v0.values[-1]
    v = v0.values.copy()
    blown = False
    last = len(times) - 1
    with np.errstate(over="ignore", invalid="ignore"):
        for m in range(last):
            va, vb = _step_pair(v, lam[m], lam[m + 1], theta, q, tg.dt, dx)
            g = policy.gain(m)
            off = policy.offset(m, v, va, vb, times[m + 1])
            if g is None:
                U = off
            else:
                wg = w * g
                U = (float(wg @ va) + off) / (1.0 - float(wg @ vb))
            v = va + U * vb
            if not np.all(np.isfinite(v)) or np.max(np.abs(v)) > BLOWUP_THRESHOLD:
                blown = True
                last = m
                break
            states[m + 1] = v
            controls[m + 1] = U
    if blown:
        times, states, controls = times[:last + 1], states[:last + 1], controls[:last + 1]
    meta = {"controller": ctrl.name, "n": n, "dt": tg.dt, "T": tg.T, "margin": tg.margin,
            "theta": theta, "q": q, "coeff": spec.to_dict()}
    return Trajectory(grid, times.copy(), states, controls, blown, meta)


# ---------------------------------------------------------------------------
# target-system residuals


@dataclass
class ResidualReport:
    """Target-system residuals.

    ``max_boundary`` covers the controlled times t > 0; the initial state is
    data, not the output of the feedback, so |w(1, 0)| is reported apart as
    ``initial_boundary``.
    """

    times: np.ndarray
    boundary: np.ndarray
    interior: np.ndarray
    max_boundary: float
    initial_boundary: float
    max_interior: float
    max_state_norm: float


def transform_states(states: np.ndarray, kernels: np.ndarray, dx: float) -> np.ndarray:
    """Batched w = v - int_0^x k v dy for stacks of states and kernel slices."""
    W = volterra_weights(states.shape[-1], dx)
    return states - np.einsum("mij,mj->mi", W * np.tril(kernels), states)


def _match_indices(traj_times, ktimes, dt):
    idx = np.rint(np.asarray(ktimes) / dt).astype(int)
    ok = (idx >= 0) & (idx < len(traj_times))
    ok &= np.abs(traj_times[np.clip(idx, 0, len(traj_times) - 1)] - ktimes) < 1e-9
    return idx[ok], np.nonzero(ok)[0]


def target_residual(traj: Trajectory, ktraj: KernelTrajectory, sched: GainSchedule,
                    theta: float, q: float) -> ResidualReport:
    """|w(1, t)| and the target-PDE residual w_t - theta w_xx + c w.

    The interior residual is the Crank-Nicolson-centred one between
    consecutive stored times, in max norm over interior nodes.
    """
    if ktraj.grid.n != traj.grid.n:
        raise ValueError("kernel and state grids differ")
    dt = traj.meta.get("dt", float(traj.times[1] - traj.times[0]) if len(traj) > 1 else 1.0)
    si, ki = _match_indices(traj.times, ktraj.times, dt)
    if len(si) == 0:
        raise ValueError("kernel trajectory shares no timestamps with the simulation")
    dx = traj.grid.dx
    w = transform_states(traj.states[si], ktraj.values[ki], dx)
    boundary = np.abs(w[:, -1])
    interior = np.full(len(si), np.nan)
    consecutive = np.nonzero(np.diff(si) == 1)[0]
    if len(consecutive):
        a, b = w[consecutive], w[consecutive + 1]
        ta, tb = traj.times[si[consecutive]], traj.times[si[consecutive + 1]]
        h = (tb - ta)[:, None]
        wxx = lambda u: (u[:, 2:] - 2 * u[:, 1:-1] + u[:, :-2]) / dx ** 2
        c = 0.5 * (sched.c(ta) + sched.c(tb))[:, None]
        res = ((b[:, 1:-1] - a[:, 1:-1]) / h - 0.5 * theta * (wxx(a) + wxx(b))
               + c * 0.5 * (a[:, 1:-1] + b[:, 1:-1]))
        interior[consecutive + 1] = np.max(np.abs(res), axis=1)
    norms = traj.l2_norms()
    controlled = si > 0
    initial = boundary[~controlled]
    return ResidualReport(
        traj.times[si], boundary, interior,
        float(boundary[controlled].max()) if controlled.any() else 0.0,
        float(initial[0]) if len(initial) else float("nan"),
        float(np.nanmax(interior)) if np.any(np.isfinite(interior)) else float("nan"),
        float(norms.max()))


# ---------------------------------------------------------------------------
# export


def write_csv(path, header: list[str], rows, config_hash: str | None = None):
    path = Path(path)
    with path.open("w", newline="") as fh:
        if config_hash is not None:
            fh.write(f"# config_hash={config_hash}\n")
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        writer.writerows(rows)
    return path


def export_trajectory(traj: Trajectory, directory, run_id: str,
                      config_hash: str | None = None, stride: int = 1) -> tuple[Path, Path]:
    """Write ``<run_id>_state.csv`` (t,x,v) and ``<run_id>_scalar.csv`` (t,U,l2norm)."""
    directory = Path(directory)
    x = traj.grid.nodes
    picks = np.arange(0, len(traj), stride)
    if picks[-1] != len(traj) - 1:
        picks = np.append(picks, len(traj) - 1)
    norms = traj.l2_norms()
    state_rows = ((repr(float(traj.times[m])), repr(float(xi)), repr(float(traj.states[m, i])))
                  for m in picks for i, xi in enumerate(x))
    scalar_rows = ((repr(float(traj.times[m])), repr(float(traj.controls[m])), repr(float(norms[m])))
                   for m in picks)
    a = write_csv(directory / f"{run_id}_state.csv", ["t", "x", "v"], state_rows, config_hash)
    b = write_csv(directory / f"{run_id}_scalar.csv", ["t", "U", "l2norm"], scalar_rows, config_hash)
    return a, b
