"""Grids, quadrature, coefficient evaluation and a batched tridiagonal solver."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any

import numpy as np


class DomainError(ValueError):
    """Raised when a coefficient is evaluated outside its domain (e.g. t >= T)."""


class NumericError(ArithmeticError):
    """Raised on singular linear systems or non-finite intermediate values."""


# ---------------------------------------------------------------------------
# grids


@dataclass(frozen=True)
class SpaceGrid:
    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"SpaceGrid needs n >= 2 nodes, got {self.n!r}")

    @property
    def dx(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def nodes(self) -> np.ndarray:
        x = np.arange(self.n) * self.dx
        x[-1] = 1.0
        return x

    @classmethod
    def from_dx(cls, dx: float) -> "SpaceGrid":
        n = int(round(1.0 / dx)) + 1
        if abs((n - 1) * dx - 1.0) > 1e-9:
            raise ValueError(f"dx={dx} does not divide the unit interval")
        return cls(n)


@dataclass(frozen=True)
class TriGrid:
    """Lower-triangular lattice {(x_i, y_j): 0 <= j <= i <= n-1}.

    Kernel fields on it are held as dense (n, n) arrays whose strict upper
    triangle is zero; ``pack``/``unpack`` convert to the row-major list of the
    n(n+1)/2 lattice values.
    """

    n: int

    def __post_init__(self):
        if int(self.n) != self.n or self.n < 2:
            raise ValueError(f"TriGrid needs n >= 2, got {self.n!r}")

    @property
    def dx(self) -> float:
        return 1.0 / (self.n - 1)

    @property
    def size(self) -> int:
        return self.n * (self.n + 1) // 2

    @property
    def space(self) -> SpaceGrid:
        return SpaceGrid(self.n)

    def indices(self) -> tuple[np.ndarray, np.ndarray]:
        return np.tril_indices(self.n)

    def points(self) -> np.ndarray:
        """(size, 2) array of (x, y) for every lattice node, row-major."""
        i, j = self.indices()
        x = self.space.nodes
        return np.column_stack([x[i], x[j]])

    def pack(self, values: np.ndarray) -> np.ndarray:
        i, j = self.indices()
        return np.ascontiguousarray(values[..., i, j])

    def unpack(self, packed: np.ndarray) -> np.ndarray:
        packed = np.asarray(packed, dtype=float)
        out = np.zeros(packed.shape[:-1] + (self.n, self.n))
        i, j = self.indices()
        out[..., i, j] = packed
        return out

    def l2_norm(self, values: np.ndarray) -> np.ndarray:
        """L2(Omega) norm by iterated trapezoid: in y along each row, then in x."""
        dx = self.dx
        n = self.n
        v2 = np.asarray(values, dtype=float) ** 2
        wy = np.tril(np.full((n, n), dx))
        idx = np.arange(n)
        wy[:, 0] *= 0.5
        wy[idx, idx] = 0.5 * dx
        wy[0, 0] = 0.0
        rows = np.sum(v2 * wy, axis=-1)
        return np.sqrt(trapezoid(rows, dx))


@dataclass(frozen=True)
class TimeGrid:
    dt: float
    T: float
    margin: float

    def __post_init__(self):
        if not self.dt > 0:
            raise ValueError(f"dt must be positive, got {self.dt}")
        if not 0 < self.margin < self.T:
            raise ValueError(f"need 0 < margin < T, got margin={self.margin}, T={self.T}")

    @property
    def stop(self) -> float:
        return self.T - self.margin

    @property
    def n_steps(self) -> int:
        return int(math.floor(self.stop / self.dt + 1e-9))

    @property
    def times(self) -> np.ndarray:
        return np.arange(self.n_steps + 1) * self.dt

    @classmethod
    def with_default_margin(cls, dt: float, T: float) -> "TimeGrid":
        return cls(dt=dt, T=T, margin=0.05 * T)


# ---------------------------------------------------------------------------
# coefficients


@dataclass(frozen=True)
class CoeffSpec:
    """Reaction coefficient lambda(x, t) plus the plant constants theta and q.

    ``kind`` is ``"chebyshev_blowup"``, i.e.
    lambda = base + cos(sigma*arccos(x)) + T/(T-t)^2, or ``"tabulated"``
    (bilinear interpolation on ``table_x`` x ``table_t``, clamped outside).
    """

    kind: str
    theta: float = 1.0
    q: float = 1.0
    sigma: float = 0.0
    base: float = 5.0
    T: float = 8.0
    table_x: tuple = field(default=(), repr=False)
    table_t: tuple = field(default=(), repr=False)
    table: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if not self.theta > 0:
            raise ValueError(f"theta must be > 0, got {self.theta}")
        if not self.q > 0:
            raise ValueError(f"q must be > 0, got {self.q}")
        if self.kind not in ("chebyshev_blowup", "tabulated"):
            raise ValueError(f"unknown coefficient kind {self.kind!r}")
        if self.kind == "tabulated":
            vals = np.asarray(self.table, dtype=float)
            if vals.shape != (len(self.table_t), len(self.table_x)):
                raise ValueError("tabulated lambda must have shape (len(t), len(x))")

    @classmethod
    def chebyshev_blowup(cls, sigma: float, T: float, base: float = 5.0,
                         theta: float = 1.0, q: float = 1.0) -> "CoeffSpec":
        return cls("chebyshev_blowup", theta=theta, q=q, sigma=float(sigma),
                   base=float(base), T=float(T))

    @classmethod
    def tabulated(cls, x, t, values, theta: float = 1.0, q: float = 1.0) -> "CoeffSpec":
        values = np.asarray(values, dtype=float)
        return cls("tabulated", theta=theta, q=q,
                   table_x=tuple(map(float, x)), table_t=tuple(map(float, t)),
                   table=tuple(map(tuple, values)))

    def lam(self, x, t, *, check: bool = True) -> np.ndarray:
        """Vectorised lambda(x, t) with numpy broadcasting."""
        x = np.asarray(x, dtype=float)
        t = np.asarray(t, dtype=float)
        if self.kind == "chebyshev_blowup":
            if check and np.any(t >= self.T):
                raise DomainError(f"lambda blows up at t = T = {self.T}; got t = {np.max(t)}")
            xc = np.clip(x, -1.0, 1.0)
            return self.base + np.cos(self.sigma * np.arccos(xc)) + self.T / (self.T - t) ** 2
        return _bilinear(np.asarray(self.table_x), np.asarray(self.table_t),
                         np.asarray(self.table), x, t)

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind, "theta": self.theta, "q": self.q}
        if self.kind == "chebyshev_blowup":
            d.update(sigma=self.sigma, base=self.base, T=self.T)
        else:
            d.update(table_x=list(self.table_x), table_t=list(self.table_t),
                     table=[list(r) for r in self.table])
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "CoeffSpec":
        if d["kind"] == "chebyshev_blowup":
            return cls.chebyshev_blowup(d["sigma"], d["T"], d.get("base", 5.0),
                                        d.get("theta", 1.0), d.get("q", 1.0))
        return cls.tabulated(d["table_x"], d["table_t"], d["table"],
                             d.get("theta", 1.0), d.get("q", 1.0))


def _bilinear(xs, ts, table, x, t):
    x = np.clip(x, xs[0], xs[-1])
    t = np.clip(t, ts[0], ts[-1])
    x, t = np.broadcast_arrays(x, t)
    ix = np.clip(np.searchsorted(xs, x, side="right") - 1, 0, max(len(xs) - 2, 0))
    it = np.clip(np.searchsorted(ts, t, side="right") - 1, 0, max(len(ts) - 2, 0))
    if len(xs) > 1:
        fx = (x - xs[ix]) / (xs[ix + 1] - xs[ix])
        ix1 = ix + 1
    else:
        fx, ix1 = np.zeros_like(x), ix
    if len(ts) > 1:
        ft = (t - ts[it]) / (ts[it + 1] - ts[it])
        it1 = it + 1
    else:
        ft, it1 = np.zeros_like(t), it
    v00 = table[it, ix]
    v01 = table[it, ix1]
    v10 = table[it1, ix]
    v11 = table[it1, ix1]
    return (1 - ft) * ((1 - fx) * v00 + fx * v01) + ft * ((1 - fx) * v10 + fx * v11)


@dataclass(frozen=True)
class GainSchedule:
    """Damping gain c(t) of the target system; ``prescribed`` means 2T/(T-t)^2."""

    kind: str
    T: float
    table_t: tuple = field(default=(), repr=False)
    table_c: tuple = field(default=(), repr=False)

    def __post_init__(self):
        if self.kind not in ("prescribed", "tabulated"):
            raise ValueError(f"unknown gain schedule {self.kind!r}")
        if not self.T > 0:
            raise ValueError("T must be positive")
        if self.kind == "tabulated" and np.any(np.asarray(self.table_c) <= 0):
            raise ValueError("tabulated c(t) must be positive")

    @classmethod
    def prescribed(cls, T: float) -> "GainSchedule":
        return cls("prescribed", float(T))

    @classmethod
    def tabulated(cls, t, c, T: float) -> "GainSchedule":
        return cls("tabulated", float(T), tuple(map(float, t)), tuple(map(float, c)))

    def c(self, t, *, check: bool = True) -> np.ndarray:
        t = np.asarray(t, dtype=float)
        if check and np.any(t >= self.T):
            raise DomainError(f"c(t) is singular at t = T = {self.T}; got t = {np.max(t)}")
        if self.kind == "prescribed":
            return 2.0 * self.T / (self.T - t) ** 2
        return np.interp(t, self.table_t, self.table_c)

    def integral(self, t) -> np.ndarray:
        """int_0^t c(tau) dtau (closed form for the prescribed schedule)."""
        t = np.asarray(t, dtype=float)
        if np.any(t >= self.T):
            raise DomainError(f"integral of c diverges at T = {self.T}")
        if self.kind == "prescribed":
            return 2.0 * t / (self.T - t)
        ts = np.asarray(self.table_t)
        cs = np.asarray(self.table_c)
        out = []
        for tt in np.atleast_1d(t):
            grid = np.concatenate([[0.0], ts[(ts > 0) & (ts < tt)], [tt]])
            out.append(trapezoid_nonuniform(np.interp(grid, ts, cs), grid))
        return np.asarray(out).reshape(t.shape)

    def to_dict(self) -> dict[str, Any]:
        d = {"kind": self.kind, "T": self.T}
        if self.kind == "tabulated":
            d.update(table_t=list(self.table_t), table_c=list(self.table_c))
        return d

    @classmethod
    def from_dict(cls, d: dict[str, Any]) -> "GainSchedule":
        if d["kind"] == "prescribed":
            return cls.prescribed(d["T"])
        return cls.tabulated(d["table_t"], d["table_c"], d["T"])


def eval_lambda(spec: CoeffSpec, x, t):
    if np.any(np.asarray(x) < 0) or np.any(np.asarray(x) > 1):
        raise DomainError("x must lie in [0, 1]")
    return spec.lam(x, t)


def eval_c(sched: GainSchedule, t):
    if np.any(np.asarray(t) < 0):
        raise DomainError("t must be nonnegative")
    return sched.c(t)


def eval_gamma(spec: CoeffSpec, sched: GainSchedule, x, t):
    return eval_lambda(spec, x, t) + eval_c(sched, t)


def gamma_field(spec: CoeffSpec, sched: GainSchedule, x: np.ndarray,
                times: np.ndarray) -> np.ndarray:
    """gamma on the lattice times x nodes, shape (len(times), len(x)).

    No domain checks on t < 0; the kernel solver evaluates a few halo
    slices just outside [0, T - margin] for central time differences.
    """
    times = np.asarray(times, dtype=float)
    lam = spec.lam(x[None, :], times[:, None], check=True)
    return lam + sched.c(times, check=True)[:, None]


# ---------------------------------------------------------------------------
# quadrature


def trapezoid(values, dx: float, axis: int = -1):
    values = np.asarray(values, dtype=float)
    if values.shape[axis] < 2:
        raise ValueError("trapezoid needs at least 2 values")
    if not dx > 0:
        raise ValueError("dx must be positive")
    v = np.moveaxis(values, axis, -1)
    return dx * (v.sum(axis=-1) - 0.5 * (v[..., 0] + v[..., -1]))


def trapezoid_nonuniform(values, grid) -> float:
    values = np.asarray(values, dtype=float)
    grid = np.asarray(grid, dtype=float)
    return float(np.sum(0.5 * (values[1:] + values[:-1]) * np.diff(grid)))


def trapezoid_weights(n: int, dx: float) -> np.ndarray:
    w = np.full(n, dx)
    w[0] = w[-1] = 0.5 * dx
    return w


def cumulative_trapezoid(values, dx: float) -> np.ndarray:
    """Running integrals int_0^{x_i} along the last axis, starting at 0."""
    v = np.asarray(values, dtype=float)
    inc = 0.5 * (v[..., 1:] + v[..., :-1]) * dx
    out = np.zeros_like(v)
    np.cumsum(inc, axis=-1, out=out[..., 1:])
    return out


# ---------------------------------------------------------------------------
# linear algebra


def solve_tridiagonal(lower, diag, upper, rhs) -> np.ndarray:
    """Thomas algorithm, batched over leading axes.

    ``lower[..., i]`` multiplies x[i-1] in row i (lower[..., 0] ignored);
    ``upper[..., i]`` multiplies x[i+1] (upper[..., -1] ignored). ``rhs`` may
    carry one extra trailing axis for several right-hand sides.
    """
    a = np.asarray(lower, dtype=float)
    b = np.asarray(diag, dtype=float)
    c = np.asarray(upper, dtype=float)
    d = np.asarray(rhs, dtype=float)
    extra = d.ndim == b.ndim + 1
    if extra:
        a, b, c = a[..., None], b[..., None], c[..., None]
        a, b, c, d = (np.moveaxis(z, -2, 0) for z in np.broadcast_arrays(a, b, c, d))
    else:
        a, b, c, d = (np.moveaxis(z, -1, 0) for z in np.broadcast_arrays(a, b, c, d))
    n = b.shape[0]
    cp = np.empty_like(b)
    dp = np.empty_like(d)
    piv = b[0]
    if np.any(piv == 0):
        raise NumericError("singular tridiagonal system (zero pivot in row 0)")
    cp[0] = c[0] / piv
    dp[0] = d[0] / piv
    for i in range(1, n):
        piv = b[i] - a[i] * cp[i - 1]
        if np.any(piv == 0):
            raise NumericError(f"singular tridiagonal system (zero pivot in row {i})")
        cp[i] = c[i] / piv
        dp[i] = (d[i] - a[i] * dp[i - 1]) / piv
    x = np.empty_like(dp)
    x[-1] = dp[-1]
    for i in range(n - 2, -1, -1):
        x[i] = dp[i] - cp[i] * x[i + 1]
    if not np.all(np.isfinite(x)):
        raise NumericError("non-finite solution of tridiagonal system")
    out = np.moveaxis(x, 0, -2 if extra else -1)
    return out
