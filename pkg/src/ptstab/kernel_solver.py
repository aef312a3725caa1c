"""Backstepping kernel solvers on the triangle 0 <= y <= x <= 1.

Direct kernel:   k_t = theta (k_xx - k_yy) - gamma(y, t) k
Inverse kernel:  l_t = theta (l_xx - l_yy) + gamma(x, t) l
both with k_y(x, 0) = q k(x, 0) and k(x, x) = -(1/2 theta) int_0^x gamma.

In space the operator theta (d_xx - d_yy) is a wave operator with x as the
time-like direction, so for a given source term each slice is a Goursat
problem that is solved by marching along characteristics (diamond cells in
the interior, half cells against the diagonal).  The time derivative enters
that march as a source and is resolved by successive approximation with
central differences over the time grid.
"""
from __future__ import annotations

import hashlib
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .core_grid import (CoeffSpec, GainSchedule, NumericError, TimeGrid, TriGrid,
                   cumulative_trapezoid, gamma_field, solve_tridiagonal)

DIRECT = "direct"
INVERSE = "inverse"
FORMAT_VERSION = 1


class KernelIterationError(RuntimeError):
    def __init__(self, message: str, residual: float):
        super().__init__(f"{message} (final residual {residual:.3e})")
        self.residual = residual


@dataclass
class KernelSlice:
    grid: TriGrid
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        n = self.grid.n
        if self.values.shape != (n, n):
            raise ValueError(f"kernel slice must be ({n}, {n}), got {self.values.shape}")

    def packed(self) -> np.ndarray:
        return self.grid.pack(self.values)

    def diagonal_violation(self, gamma: np.ndarray, theta: float) -> float:
        """max |k(x,x) + (1/2 theta) int_0^x gamma| over the diagonal nodes."""
        target = diagonal_data(gamma, self.grid.dx, theta)
        return float(np.max(np.abs(np.diagonal(self.values) - target)))


@dataclass
class KernelTrajectory:
    grid: TriGrid
    times: np.ndarray
    values: np.ndarray
    kind: str = DIRECT
    meta: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        self.times = np.asarray(self.times, dtype=float)
        if self.kind not in (DIRECT, INVERSE):
            raise ValueError(f"kind must be direct or inverse, got {self.kind!r}")
        if self.values.shape != (len(self.times), self.grid.n, self.grid.n):
            raise ValueError("values must have shape (n_times, n, n)")
        if len(self.times) > 1 and np.any(np.diff(self.times) <= 0):
            raise ValueError("timestamps must be strictly increasing")

    def __len__(self):
        return len(self.times)

    def slice(self, m: int) -> KernelSlice:
        return KernelSlice(self.grid, self.values[m], float(self.times[m]))

    def sup_norm(self) -> float:
        return float(np.max(np.abs(self.values)))

    def gain_rows(self) -> np.ndarray:
        return self.values[:, -1, :]


# ---------------------------------------------------------------------------
# building blocks


def cfl_check(theta: float, dx: float, dt: float) -> bool:
    """True iff theta*dt/dx^2 <= 1/2 (explicit x-diffusion of the IMEX step)."""
    return theta * dt / dx ** 2 <= 0.5


def diagonal_data(gamma: np.ndarray, dx: float, theta: float) -> np.ndarray:
    return -cumulative_trapezoid(gamma, dx) / (2.0 * theta)


def _half_diagonal(gamma: np.ndarray, dx: float, theta: float) -> np.ndarray:
    """Diagonal data at x = (i + 1/2) dx, gamma linearly interpolated."""
    full = cumulative_trapezoid(gamma, dx)
    mid = 0.5 * (gamma[..., 1:] + gamma[..., :-1])
    half = full[..., :-1] + 0.25 * dx * (gamma[..., :-1] + mid)
    return -half / (2.0 * theta)


def _reaction(gamma: np.ndarray, kind: str) -> np.ndarray:
    """Coefficient beta in theta (k_xx - k_yy) = beta k + k_t, shape (..., n, n)."""
    n = gamma.shape[-1]
    if kind == DIRECT:
        return np.broadcast_to(gamma[..., None, :], gamma.shape[:-1] + (n, n))
    return np.broadcast_to(-gamma[..., :, None], gamma.shape[:-1] + (n, n))


def _march(gamma, theta, q, kind, source=None, previous=None):
    """Characteristic march for theta (k_xx - k_yy) = beta k + source.

    With ``previous`` the reaction term uses that iterate (one Picard sweep of
    the Volterra form); otherwise it uses the values being marched, which is
    the converged fixed point of those sweeps.
    """
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[-1]
    N = n - 1
    dx = 1.0 / N
    r = dx * dx / theta
    beta = _reaction(gamma, kind)
    d = diagonal_data(gamma, dx, theta)
    h = _half_diagonal(gamma, dx, theta)
    K = np.zeros(gamma.shape[:-1] + (n, n))
    idx = np.arange(n)
    K[..., idx, idx] = d
    R = K if previous is None else previous
    F = source
    K[..., 1, 0] = K[..., 1, 1] / (1.0 + q * dx)
    robin = 3.0 + 2.0 * q * dx
    for i in range(1, N):
        rhs = beta[..., i, 1:i] * R[..., i, 1:i]
        if F is not None:
            rhs = rhs + F[..., i, 1:i]
        K[..., i + 1, 1:i] = K[..., i, 2:i + 1] + K[..., i, 0:i - 1] - K[..., i - 1, 1:i] + r * rhs
        bc = 0.5 * (beta[..., i, i - 1] + beta[..., i, i])
        kc = 0.5 * (R[..., i, i - 1] + R[..., i, i])
        rc = bc * kc
        if F is not None:
            rc = rc + 0.5 * (F[..., i, i - 1] + F[..., i, i])
        K[..., i + 1, i] = K[..., i, i - 1] + h[..., i] - h[..., i - 1] + 0.5 * r * rc
        K[..., i + 1, 0] = (4.0 * K[..., i + 1, 1] - K[..., i + 1, 2]) / robin
    return K


def stationary_residual(k: np.ndarray, gamma: np.ndarray, theta: float, q: float,
                        kind: str = DIRECT, source=None) -> float:
    """Max-norm residual of the discrete stationary equations.

    Interior nodes use central differences, nodes next to the diagonal the
    one-sided half-cell relation; both are scaled to PDE units
    (theta (k_xx - k_yy) - beta k - source).  Boundary conditions are part of
    the residual as well.
    """
    k = np.asarray(k, dtype=float)
    gamma = np.asarray(gamma, dtype=float)
    n = gamma.shape[-1]
    N = n - 1
    dx = 1.0 / N
    beta = _reaction(gamma, kind)
    F = np.zeros_like(k) if source is None else source
    worst = 0.0
    idx = np.arange(n)
    worst = max(worst, float(np.max(np.abs(k[..., idx, idx] - diagonal_data(gamma, dx, theta)))))
    worst = max(worst, float(np.max(np.abs(k[..., 1, 0] * (1 + q * dx) - k[..., 1, 1]))) / dx)
    if n > 2:
        rob = (-(3 + 2 * q * dx) * k[..., 2:, 0] + 4 * k[..., 2:, 1] - k[..., 2:, 2]) / (2 * dx)
        worst = max(worst, float(np.max(np.abs(rob))))
    h = _half_diagonal(gamma, dx, theta)
    for i in range(1, N):
        if i > 1:
            lap = (k[..., i + 1, 1:i] - k[..., i, 2:i + 1] - k[..., i, 0:i - 1] + k[..., i - 1, 1:i]) * theta / dx ** 2
            res = lap - beta[..., i, 1:i] * k[..., i, 1:i] - F[..., i, 1:i]
            worst = max(worst, float(np.max(np.abs(res))))
        jump = k[..., i + 1, i] - k[..., i, i - 1] - (h[..., i] - h[..., i - 1])
        rc = (0.5 * (beta[..., i, i - 1] + beta[..., i, i]) * 0.5 * (k[..., i, i - 1] + k[..., i, i])
              + 0.5 * (F[..., i, i - 1] + F[..., i, i]))
        res = 2 * theta * jump / dx ** 2 - rc
        worst = max(worst, float(np.max(np.abs(res))))
    return worst


def solve_stationary_kernel(gamma, theta: float, q: float, grid: TriGrid,
                            tol: float = 1e-8, max_iter: int = 200,
                            kind: str = DIRECT, t: float = 0.0) -> KernelSlice:
    """Frozen-coefficient kernel by Picard successive approximation."""
    if not tol > 0:
        raise ValueError("tol must be positive")
    gamma = np.asarray(gamma, dtype=float)
    if gamma.shape != (grid.n,):
        raise ValueError(f"gamma must have {grid.n} nodes")
    if not np.all(np.isfinite(gamma)):
        raise ValueError("gamma must be finite")
    k = _march(gamma, theta, q, kind, previous=np.zeros((grid.n, grid.n)))
    res = math.inf
    for _ in range(max_iter):
        k = _march(gamma, theta, q, kind, previous=k)
        res = stationary_residual(k, gamma, theta, q, kind)
        if res < tol:
            return KernelSlice(grid, k, t)
    raise KernelIterationError(f"Picard iteration did not converge in {max_iter} sweeps", res)


# ---------------------------------------------------------------------------
# IMEX step


def step_kernel_imex(k: KernelSlice, gamma_now, gamma_next, theta: float, q: float,
                     dt: float, kind: str = DIRECT) -> KernelSlice:
    """One IMEX step: -theta k_yy implicit per x-line, theta k_xx and reaction explicit.

    The x = 1 row has no x-neighbour above it; it is closed with the
    characteristic relation of the row below, with the time derivative taken
    from the freshly updated row.  Note: -theta k_yy is anti-diffusive, so
    repeating this step amplifies high y-frequencies.  The trajectory solver
    does not march with it.
    """
    grid = k.grid
    n = grid.n
    N = n - 1
    dx = grid.dx
    if not cfl_check(theta, dx, dt):
        raise NumericError(f"CFL violated: theta*dt/dx^2 = {theta * dt / dx ** 2:.3f} > 0.5")
    gamma_now = np.asarray(gamma_now, dtype=float)
    gamma_next = np.asarray(gamma_next, dtype=float)
    old = k.values
    beta = _reaction(gamma_now, kind)
    alpha = theta * dt / dx ** 2
    d_next = diagonal_data(gamma_next, dx, theta)

    # padded batch of x-lines i = 1..N-1, unknowns j = 0..n-1
    lines = np.arange(1, N)
    L = len(lines)
    lo = np.zeros((L, n))
    di = np.ones((L, n))
    up = np.zeros((L, n))
    rhs = np.zeros((L, n))
    for row, i in enumerate(lines):
        rhs[row, i] = d_next[i]
        if i == 1:
            di[row, 0] = -(1.0 + q * dx)
            up[row, 0] = 1.0
            continue
        j = np.arange(1, i)
        kxx = (old[i + 1, j] - 2 * old[i, j] + old[i - 1, j]) / dx ** 2
        lo[row, j] = alpha
        di[row, j] = 1.0 - 2.0 * alpha
        up[row, j] = alpha
        rhs[row, j] = old[i, j] + dt * (theta * kxx - beta[i, j] * old[i, j])
        # Robin row -(3+2q dx) k0 + 4 k1 - k2 = 0 with k2 eliminated through row 1
        f = -1.0 / alpha
        di[row, 0] = -(3.0 + 2.0 * q * dx) - f * alpha
        up[row, 0] = 4.0 - f * (1.0 - 2.0 * alpha)
        rhs[row, 0] = -f * rhs[row, 1]
    new = np.zeros_like(old)
    new[0, 0] = d_next[0]
    if L:
        sol = solve_tridiagonal(lo, di, up, rhs)
        for row, i in enumerate(lines):
            new[i, :i + 1] = sol[row, :i + 1]
    # x = 1 row via the characteristic relation centred on row N-1
    new[N, N] = d_next[N]
    if N >= 2:
        i = N - 1
        beta_next = _reaction(gamma_next, kind)
        kt = (new - old) / dt
        r = dx * dx / theta
        j = np.arange(1, i)
        new[N, j] = (new[i, j + 1] + new[i, j - 1] - new[i - 1, j]
                     + r * (beta_next[i, j] * new[i, j] + kt[i, j]))
        h = _half_diagonal(gamma_next, dx, theta)
        rc = (0.5 * (beta_next[i, i - 1] + beta_next[i, i]) * 0.5 * (new[i, i - 1] + new[i, i])
              + 0.5 * (kt[i, i - 1] + kt[i, i]))
        new[N, i] = new[i, i - 1] + h[i] - h[i - 1] + 0.5 * r * rc
        new[N, 0] = (4 * new[N, 1] - new[N, 2]) / (3 + 2 * q * dx)
    else:
        new[1, 0] = new[1, 1] / (1 + q * dx)
    return KernelSlice(grid, new, k.t + dt)


# ---------------------------------------------------------------------------
# trajectories


def _central_dt(K: np.ndarray, dt: float) -> np.ndarray:
    return (K[2:] - K[:-2]) / (2.0 * dt)


def _solve_window(gamma: np.ndarray, theta: float, q: float, kind: str,
                  dt: float, sweeps: int) -> tuple[np.ndarray, float]:
    """Kernel on the central slices of a window carrying ``sweeps`` halo slices per side."""
    K = _march(gamma, theta, q, kind)
    change = 0.0
    for s in range(1, sweeps + 1):
        Kt = _central_dt(K, dt)
        Knew = _march(gamma[s:len(gamma) - s], theta, q, kind, source=Kt)
        inner = Knew[sweeps - s:len(Knew) - (sweeps - s)]
        prev = K[sweeps - s + 1:len(K) - (sweeps - s + 1)]
        scale = np.maximum(np.max(np.abs(inner), axis=(-2, -1)), 1.0)
        change = float(np.max(np.max(np.abs(inner - prev), axis=(-2, -1)) / scale))
        K = Knew
    return K, change


def solve_kernel_trajectory(spec: CoeffSpec, sched: GainSchedule, grid: TriGrid,
                            tg: TimeGrid, *, sweeps: int = 6, indices=None,
                            chunk: int | None = None, kind: str = DIRECT) -> KernelTrajectory:
    """Time-varying kernel on the slices of ``tg`` (or the subset ``indices``).

    Each slice solves theta (k_xx - k_yy) = beta k + k_t with k_t taken from
    the previous sweep by central differences; ``sweeps`` corrections are
    applied (0 gives the quasi-static kernel).  The result on a slice depends
    only on gamma at t +- sweeps*dt, so subsets are bit-identical to the
    matching slices of a full solve.
    """
    if sweeps < 0:
        raise ValueError("sweeps must be >= 0")
    theta, q = spec.theta, spec.q
    n = grid.n
    x = grid.space.nodes
    all_idx = np.arange(tg.n_steps + 1)
    want = all_idx if indices is None else np.asarray(sorted(set(int(i) for i in indices)))
    if want.size and (want[0] < 0 or want[-1] > tg.n_steps):
        raise ValueError("requested slice index outside the time grid")
    if tg.stop + sweeps * tg.dt >= min(tg.T, sched.T, spec.T if spec.kind == "chebyshev_blowup" else math.inf):
        raise ValueError("halo slices reach the blow-up time; increase margin or reduce sweeps")
    if chunk is None:
        chunk = max(1, int(2_000_000 // (n * n)))
    out = np.empty((len(want), n, n))
    worst_change = 0.0
    # group requested slices into contiguous runs, then into chunks
    pos = 0
    while pos < len(want):
        end = pos + 1
        while end < len(want) and want[end] == want[end - 1] + 1 and end - pos < chunk:
            end += 1
        lo, hi = int(want[pos]), int(want[end - 1])
        steps = np.arange(lo - sweeps, hi + sweeps + 1)
        gam = gamma_field(spec, sched, x, steps * tg.dt)
        K, change = _solve_window(gam, theta, q, kind, tg.dt, sweeps)
        if not np.all(np.isfinite(K)):
            raise NumericError(f"non-finite kernel values near t = {lo * tg.dt:.4f}")
        out[pos:end] = K
        worst_change = max(worst_change, change)
        pos = end
    meta = {
        "n": n, "dt": tg.dt, "T": tg.T, "margin": tg.margin, "theta": theta, "q": q,
        "coeff": spec.to_dict(), "gain": sched.to_dict(), "sweeps": sweeps,
        "last_sweep_change": worst_change,
        "sup_norm": float(np.max(np.abs(out))) if out.size else 0.0,
    }
    return KernelTrajectory(grid, want * tg.dt, out, kind, meta)


def solve_inverse_kernel_trajectory(spec: CoeffSpec, sched: GainSchedule, grid: TriGrid,
                                    tg: TimeGrid, **kwargs) -> KernelTrajectory:
    return solve_kernel_trajectory(spec, sched, grid, tg, kind=INVERSE, **kwargs)


def reciprocity_residual(k: KernelSlice, l: KernelSlice) -> float:
    """max |l - k - int_y^x l(x, s) k(s, y) ds| over the lattice (trapezoid in s)."""
    if k.grid != l.grid:
        raise ValueError("kernel slices live on different grids")
    if abs(k.t - l.t) > 1e-12:
        raise ValueError("kernel slices have different timestamps")
    K = np.tril(k.values)
    L = np.tril(l.values)
    dx = k.grid.dx
    dK = np.diagonal(K)
    dL = np.diagonal(L)
    conv = dx * (L @ K) - 0.5 * dx * (L * dK[None, :] + dL[:, None] * K)
    res = np.tril(L - K - conv)
    return float(np.max(np.abs(res)))


# ---------------------------------------------------------------------------
# serialization


def save_trajectory(traj: KernelTrajectory, path) -> Path:
    """Write ``<path>.json`` manifest and ``<path>.bin`` (float64 LE, packed slices)."""
    path = Path(path)
    blob = traj.grid.pack(traj.values).astype("<f8").tobytes()
    manifest = dict(traj.meta)
    manifest.update({
        "format_version": FORMAT_VERSION, "kind": traj.kind, "n": traj.grid.n,
        "times": [float(t) for t in traj.times], "slice_size": traj.grid.size,
        "layout": "slices concatenated; each slice lower-triangular values row-major (i outer, j inner)",
        "sha256": hashlib.sha256(blob).hexdigest(),
    })
    bin_path = path.with_suffix(".bin")
    bin_path.write_bytes(blob)
    path.with_suffix(".json").write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return bin_path


def load_trajectory(path) -> KernelTrajectory:
    path = Path(path)
    manifest = json.loads(path.with_suffix(".json").read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported trajectory format version")
    blob = path.with_suffix(".bin").read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError("trajectory blob checksum mismatch")
    grid = TriGrid(manifest["n"])
    packed = np.frombuffer(blob, dtype="<f8").reshape(len(manifest["times"]), grid.size)
    meta = {k: v for k, v in manifest.items()
            if k not in ("format_version", "kind", "times", "slice_size", "layout", "sha256")}
    return KernelTrajectory(grid, np.array(manifest["times"]), grid.unpack(packed),
                            manifest["kind"], meta)
