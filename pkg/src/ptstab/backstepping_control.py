"""Volterra transforms and the boundary feedback law."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core_grid import SpaceGrid, trapezoid
from .kernel_solver import KernelSlice

PLANT = "v"
TARGET = "w"


@dataclass
class StateVector:
    grid: SpaceGrid
    values: np.ndarray
    t: float = 0.0
    role: str = PLANT

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError(f"state must have {self.grid.n} values, got {self.values.shape}")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("state values must be finite")

    def l2_norm(self) -> float:
        return float(np.sqrt(trapezoid(self.values ** 2, self.grid.dx)))


@dataclass
class GainRow:
    grid: SpaceGrid
    values: np.ndarray
    t: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        if self.values.shape != (self.grid.n,):
            raise ValueError(f"gain row must have {self.grid.n} values")
        if not np.all(np.isfinite(self.values)):
            raise ValueError("gain row must be finite")


def volterra_weights(n: int, dx: float) -> np.ndarray:
    """Matrix W with (W @ f)[i] = trapezoid of f over [0, x_i] for a row-wise integrand."""
    W = np.tril(np.full((n, n), dx))
    W[:, 0] *= 0.5
    idx = np.arange(n)
    W[idx, idx] = 0.5 * dx
    W[0, 0] = 0.0
    return W


def _check(state: StateVector, k: KernelSlice, tol: float = 1e-12):
    if state.grid.n != k.grid.n:
        raise ValueError(f"state has {state.grid.n} nodes but kernel has {k.grid.n}")
    if abs(state.t - k.t) > tol:
        raise ValueError(f"state time {state.t} does not match kernel time {k.t}")


def _apply(values: np.ndarray, kernel: np.ndarray, dx: float) -> np.ndarray:
    W = volterra_weights(len(values), dx)
    return (W * kernel) @ values


def forward_transform(v: StateVector, k: KernelSlice) -> StateVector:
    """w(x) = v(x) - int_0^x k(x, y) v(y) dy."""
    _check(v, k)
    w = v.values - _apply(v.values, np.tril(k.values), v.grid.dx)
    return StateVector(v.grid, w, v.t, TARGET)


def inverse_transform(w: StateVector, l: KernelSlice) -> StateVector:
    """v(x) = w(x) + int_0^x l(x, y) w(y) dy."""
    _check(w, l)
    v = w.values + _apply(w.values, np.tril(l.values), w.grid.dx)
    return StateVector(w.grid, v, w.t, PLANT)


def control_gain(k: KernelSlice) -> GainRow:
    return GainRow(k.grid.space, k.values[-1].copy(), k.t)


def control_U(g: GainRow, v: StateVector) -> float:
    """U = int_0^1 g(y) v(y) dy."""
    if g.grid.n != v.grid.n:
        raise ValueError(f"gain row has {g.grid.n} nodes but state has {v.grid.n}")
    return float(trapezoid(g.values * v.values, v.grid.dx))
