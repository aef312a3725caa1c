"""Deep operator network (branch/trunk MLPs with a dot-product readout) in numpy.

Two heads are used:

* kernel head, lambda -> k: branch on lambda sensor samples, trunk on
  (x, y, t).  Training uses the "aligned" layout in which every function in a
  minibatch is paired with every query point, so the readout is a matrix
  product.  Targets are standardised node by node on the training lattice
  because the kernel grows by orders of magnitude towards the blow-up time.
* feedback head, (lambda, v, t) -> U: branch on the concatenation, trunk on
  t, "paired" layout (one query per input row), targets standardised.
"""
from __future__ import annotations

import hashlib
import json
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any, Callable

import numpy as np
from scipy.interpolate import CubicSpline

from .core_grid import CoeffSpec, DomainError, TriGrid
from .kernel_solver import KernelSlice

KERNEL = "kernel"
FEEDBACK = "feedback"
ALIGNED = "aligned"
PAIRED = "paired"
FORMAT_VERSION = 1

_ACTIVATIONS = {
    "tanh": (np.tanh, lambda a, z: 1.0 - a * a),
    "relu": (lambda z: np.maximum(z, 0.0), lambda a, z: (z > 0).astype(float)),
}


class TrainingDivergence(ArithmeticError):
    def __init__(self, epoch: int):
        super().__init__(f"loss became non-finite at epoch {epoch}")
        self.epoch = epoch


# ---------------------------------------------------------------------------
# MLP


@dataclass
class MLP:
    sizes: list[int]
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    activation: str = "tanh"

    def __post_init__(self):
        if self.activation not in _ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if len(self.weights) != len(self.sizes) - 1 or len(self.biases) != len(self.weights):
            raise ValueError("layer count does not match sizes")
        for W, b, a, c in zip(self.weights, self.biases, self.sizes[:-1], self.sizes[1:]):
            if W.shape != (a, c) or b.shape != (c,):
                raise ValueError(f"layer shape mismatch: expected ({a}, {c})")

    @classmethod
    def init(cls, sizes, rng: np.random.Generator, activation: str = "tanh") -> "MLP":
        """Glorot-uniform weights, zero biases."""
        sizes = [int(s) for s in sizes]
        weights, biases = [], []
        for a, c in zip(sizes[:-1], sizes[1:]):
            lim = np.sqrt(6.0 / (a + c))
            weights.append(rng.uniform(-lim, lim, size=(a, c)))
            biases.append(np.zeros(c))
        return cls(sizes, weights, biases, activation)

    @classmethod
    def zeros(cls, sizes, activation: str = "tanh") -> "MLP":
        sizes = [int(s) for s in sizes]
        return cls(sizes, [np.zeros((a, c)) for a, c in zip(sizes[:-1], sizes[1:])],
                   [np.zeros(c) for c in sizes[1:]], activation)

    def parameters(self) -> list[np.ndarray]:
        out = []
        for W, b in zip(self.weights, self.biases):
            out += [W, b]
        return out


def _mlp_forward_cached(net: MLP, x: np.ndarray):
    act, _ = _ACTIVATIONS[net.activation]
    acts, pre = [x], []
    a = x
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W + b
        pre.append(z)
        a = z if l == last else act(z)
        acts.append(a)
    return a, (acts, pre)


def _mlp_backward(net: MLP, cache, grad_out: np.ndarray) -> list[np.ndarray]:
    _, dact = _ACTIVATIONS[net.activation]
    acts, pre = cache
    grads: list[np.ndarray] = [None] * (2 * len(net.weights))
    g = grad_out
    for l in range(len(net.weights) - 1, -1, -1):
        grads[2 * l] = acts[l].T @ g
        grads[2 * l + 1] = g.sum(axis=0)
        if l > 0:
            g = (g @ net.weights[l].T) * dact(acts[l], pre[l - 1])
    return grads


def mlp_forward(net: MLP, x) -> np.ndarray:
    """Evaluate on a vector or on a (batch, in) array, without keeping intermediates."""
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != net.sizes[0]:
        raise ValueError(f"input has {x.shape[-1]} features, network expects {net.sizes[0]}")
    act, _ = _ACTIVATIONS[net.activation]
    a = x.reshape(-1, net.sizes[0])
    last = len(net.weights) - 1
    for l, (W, b) in enumerate(zip(net.weights, net.biases)):
        z = a @ W
        z += b
        if l != last:
            z = np.tanh(z, out=z) if act is np.tanh else act(z)
        a = z
    return a.reshape(x.shape[:-1] + (net.sizes[-1],))


# ---------------------------------------------------------------------------
# operator


@dataclass
class Affine:
    """x -> (x - shift) / scale, elementwise over the last axis."""

    shift: np.ndarray
    scale: np.ndarray

    @classmethod
    def identity(cls, dim: int) -> "Affine":
        return cls(np.zeros(dim), np.ones(dim))

    @classmethod
    def standardize(cls, data: np.ndarray) -> "Affine":
        data = np.asarray(data, dtype=float)
        mean = data.mean(axis=0)
        std = data.std(axis=0)
        std = np.where(std > 1e-12 * np.maximum(np.abs(mean), 1.0), std, 1.0)
        return cls(mean, std)

    def apply(self, x):
        return (np.asarray(x, dtype=float) - self.shift) / self.scale

    def invert(self, z):
        return np.asarray(z, dtype=float) * self.scale + self.shift

    def to_dict(self):
        return {"shift": np.atleast_1d(self.shift).tolist(), "scale": np.atleast_1d(self.scale).tolist()}

    @classmethod
    def from_dict(cls, d):
        return cls(np.array(d["shift"], dtype=float), np.array(d["scale"], dtype=float))


@dataclass
class DeepOperator:
    branch: MLP
    trunk: MLP
    bias: float = 0.0
    kind: str = KERNEL
    layout: str = PAIRED
    branch_norm: Affine | None = None
    trunk_norm: Affine | None = None
    target_norm: Affine | None = None
    # kernel head output map k = m(node, t) + s(node, t) z on the training
    # lattice; knots in t of m and log s, s = 0 on fixed nodes (feedback head: unused)
    scale_times: np.ndarray | None = None
    scale_log: np.ndarray | None = None
    mean_knots: np.ndarray | None = None
    fixed_nodes: np.ndarray | None = None
    sensors: dict[str, Any] = field(default_factory=dict)
    info: dict[str, Any] = field(default_factory=dict)

    def __post_init__(self):
        if self.branch.sizes[-1] != self.trunk.sizes[-1]:
            raise ValueError("branch and trunk output widths differ")
        if self.branch_norm is None:
            self.branch_norm = Affine.identity(self.branch.sizes[0])
        if self.trunk_norm is None:
            self.trunk_norm = Affine.identity(self.trunk.sizes[0])
        if self.target_norm is None:
            self.target_norm = Affine(np.zeros(1), np.ones(1))

    @property
    def p(self) -> int:
        return self.branch.sizes[-1]

    @classmethod
    def init(cls, n_sensors: int, query_dim: int, seed: int, hidden=(64, 64, 64), p: int = 32,
             activation: str = "tanh", trunk_hidden=None, **kw) -> "DeepOperator":
        """Glorot-initialised branch and trunk; the trunk reuses ``hidden`` unless given its own."""
        rng = np.random.default_rng(seed)
        branch = MLP.init([n_sensors, *hidden, p], rng, activation)
        trunk = MLP.init([query_dim, *(hidden if trunk_hidden is None else trunk_hidden), p], rng, activation)
        return cls(branch, trunk, 0.0, **kw)

    def parameters(self) -> list[np.ndarray]:
        return self.branch.parameters() + self.trunk.parameters() + [np.array([self.bias])]

    def set_parameters(self, params: list[np.ndarray]):
        nb = 2 * len(self.branch.weights)
        nt = 2 * len(self.trunk.weights)
        for net, chunk in ((self.branch, params[:nb]), (self.trunk, params[nb:nb + nt])):
            net.weights = [np.array(w, dtype=float) for w in chunk[0::2]]
            net.biases = [np.array(b, dtype=float) for b in chunk[1::2]]
        self.bias = float(np.asarray(params[-1]).ravel()[0])

    def node_scale(self, t) -> np.ndarray | None:
        """s(., t) on the training lattice (packed), shape (len(t), size)."""
        if self.scale_log is None:
            return None
        s = np.exp(CubicSpline(self.scale_times, self.scale_log, axis=0)(np.atleast_1d(t)))
        if self.fixed_nodes is not None and len(self.fixed_nodes):
            s[:, self.fixed_nodes] = 0.0
        return s

    def mean_field(self, t) -> np.ndarray | None:
        """m(., t) on the training lattice (packed), shape (len(t), size).

        Nodes whose mean keeps one strict sign over the knots are interpolated
        in log magnitude, which follows the near-exponential growth towards the
        blow-up time; the rest use a plain cubic spline.
        """
        if self.mean_knots is None:
            return None
        t = np.atleast_1d(t)
        m = self.mean_knots
        out = CubicSpline(self.scale_times, m, axis=0)(t)
        sign = np.sign(m[0])
        signed = (sign != 0) & np.all(np.sign(m) == sign, axis=0)
        if np.any(signed):
            mag = CubicSpline(self.scale_times, np.log(np.abs(m[:, signed])), axis=0)(t)
            out[:, signed] = sign[signed] * np.exp(mag)
        return out


def deeponet_forward(op: DeepOperator, fn_samples, query):
    """sum_i branch_i(u) trunk_i(y) + bias, in the normalised target space.

    ``fn_samples`` (..., m) and ``query`` (..., d) are evaluated pointwise with
    broadcasting of the leading axes.
    """
    u = op.branch_norm.apply(fn_samples)
    y = op.trunk_norm.apply(query)
    b = mlp_forward(op.branch, u)
    tr = mlp_forward(op.trunk, y)
    out = np.sum(b * tr, axis=-1) + op.bias
    return float(out) if out.ndim == 0 else out


# ---------------------------------------------------------------------------
# loss


@dataclass
class Batch:
    """Normalised training data.

    aligned: u (F, m), y (Q, d), z (F, Q)
    paired:  u (B, m), y (B, d), z (B,)
    """

    u: np.ndarray
    y: np.ndarray
    z: np.ndarray
    layout: str = PAIRED

    def __len__(self):
        return len(self.u)

    def subset(self, rows) -> "Batch":
        if self.layout == ALIGNED:
            return Batch(self.u[rows], self.y, self.z[rows], ALIGNED)
        return Batch(self.u[rows], self.y[rows], self.z[rows], PAIRED)


def _readout(op, bo, to, layout):
    if layout == ALIGNED:
        return bo @ to.T + op.bias
    return np.sum(bo * to, axis=-1) + op.bias


def loss_and_gradients(op: DeepOperator, batch: Batch):
    """MSE of the raw readout against ``batch.z`` and its exact gradients.

    Inputs in ``batch`` are taken as already normalised.  Gradients are
    returned in ``op.parameters()`` order.
    """
    if len(batch) == 0:
        raise ValueError("empty batch")
    bo, bcache = _mlp_forward_cached(op.branch, batch.u)
    to, tcache = _mlp_forward_cached(op.trunk, batch.y)
    pred = _readout(op, bo, to, batch.layout)
    r = pred - batch.z
    loss = float(np.mean(r * r))
    dpred = 2.0 * r / r.size
    if batch.layout == ALIGNED:
        dbo = dpred @ to
        dto = dpred.T @ bo
    else:
        dbo = dpred[:, None] * to
        dto = dpred[:, None] * bo
    grads = _mlp_backward(op.branch, bcache, dbo) + _mlp_backward(op.trunk, tcache, dto)
    grads.append(np.array([dpred.sum()]))
    return loss, grads


def batch_loss(op: DeepOperator, batch: Batch) -> float:
    bo = mlp_forward(op.branch, batch.u)
    to = mlp_forward(op.trunk, batch.y)
    r = _readout(op, bo, to, batch.layout) - batch.z
    return float(np.mean(r * r))


def finite_difference_gradients(op: DeepOperator, batch: Batch, h: float = 1e-5):
    """Central differences of the loss for every parameter entry."""
    params = [p.copy() for p in op.parameters()]
    out = []
    for k, p in enumerate(params):
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            trial = [q.copy() for q in params]
            trial[k][idx] += h
            op.set_parameters(trial)
            lp = batch_loss(op, batch)
            trial[k][idx] -= 2 * h
            op.set_parameters(trial)
            lm = batch_loss(op, batch)
            g[idx] = (lp - lm) / (2 * h)
        out.append(g)
    op.set_parameters(params)
    return out


def gradient_check(op: DeepOperator, batch: Batch, h: float = 1e-5) -> float:
    """Largest per-tensor relative error max|a - b| / max|b| against central differences."""
    _, exact = loss_and_gradients(op, batch)
    approx = finite_difference_gradients(op, batch, h)
    worst = 0.0
    for a, b in zip(exact, approx):
        denom = max(np.max(np.abs(b)), 1e-300)
        worst = max(worst, float(np.max(np.abs(a - b)) / denom))
    return worst


# ---------------------------------------------------------------------------
# training


@dataclass
class TrainConfig:
    epochs: int = 600
    batch_size: int = 16
    query_batch: int = 0
    lr: float = 1e-3
    lr_final: float = 2e-5
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    seed: int = 0
    split: float = 0.1

    def __post_init__(self):
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not 0 < self.split < 1:
            raise ValueError("split must lie in (0, 1)")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.query_batch < 0:
            raise ValueError("query_batch must be >= 0")
        if not self.lr > 0 or not self.lr_final > 0:
            raise ValueError("learning rates must be positive")


@dataclass
class TrainResult:
    op: DeepOperator
    history: list[float]
    val_history: list[float]
    final_train_mse: float
    final_val_mse: float
    seconds: float


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(p) for p in params]
        self.v = [np.zeros_like(p) for p in params]
        self.b1, self.b2, self.eps = beta1, beta2, eps
        self.t = 0

    def step(self, params, grads, lr):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        out = []
        for p, g, m, v in zip(params, grads, self.m, self.v):
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            out.append(p - lr * (m / c1) / (np.sqrt(v / c2) + self.eps))
        return out


def train(op: DeepOperator, data: Batch, cfg: TrainConfig, val: Batch | None = None,
          log: Callable[[int, float, float], None] | None = None) -> TrainResult:
    """Minibatch Adam with a geometric learning-rate decay from lr to lr_final.

    Minibatches are rows of ``data`` (functions in the aligned layout) drawn
    in a seeded random order each epoch.  In the aligned layout a positive
    ``query_batch`` further splits each block of functions into shuffled
    chunks of query points, one Adam step per chunk.  The recorded epoch
    loss is the full-data MSE after the epoch.
    """
    if len(data) == 0:
        raise ValueError("empty dataset")
    rng = np.random.default_rng(cfg.seed)
    params = [p.copy() for p in op.parameters()]
    opt = Adam(params, cfg.beta1, cfg.beta2, cfg.eps)
    history, val_history = [], []
    start = time.perf_counter()
    ratio = cfg.lr_final / cfg.lr
    for epoch in range(cfg.epochs):
        lr = cfg.lr * ratio ** (epoch / max(cfg.epochs - 1, 1))
        order = rng.permutation(len(data))
        chunks = [slice(None)]
        if data.layout == ALIGNED and 0 < cfg.query_batch < len(data.y):
            qo = rng.permutation(len(data.y))
            chunks = [qo[c:c + cfg.query_batch] for c in range(0, len(qo), cfg.query_batch)]
        for s in range(0, len(order), cfg.batch_size):
            rows = order[s:s + cfg.batch_size]
            for qi in chunks:
                mb = Batch(data.u[rows], data.y[qi], data.z[rows][:, qi], ALIGNED) \
                    if data.layout == ALIGNED else data.subset(rows)
                loss, grads = loss_and_gradients(op, mb)
                if not np.isfinite(loss):
                    raise TrainingDivergence(epoch)
                params = opt.step(params, grads, lr)
                op.set_parameters(params)
        loss = batch_loss(op, data)
        if not np.isfinite(loss):
            raise TrainingDivergence(epoch)
        history.append(loss)
        vloss = batch_loss(op, val) if val is not None and len(val) else float("nan")
        val_history.append(vloss)
        if log is not None:
            log(epoch, loss, vloss)
    op.info.update({"epochs": cfg.epochs, "final_train_mse": history[-1],
                    "final_val_mse": val_history[-1], "train_config": asdict(cfg)})
    return TrainResult(op, history, val_history, history[-1], val_history[-1],
                       time.perf_counter() - start)


def moving_average(values, window: int = 50) -> np.ndarray:
    values = np.asarray(values, dtype=float)
    if len(values) < window:
        return values.copy()
    c = np.cumsum(np.insert(values, 0, 0.0))
    return (c[window:] - c[:-window]) / window


# ---------------------------------------------------------------------------
# sensors and the two heads


def lambda_sensor_layout(t_max: float, nx: int = 11, nt: int = 9) -> dict[str, Any]:
    return {"x": np.linspace(0.0, 1.0, nx).tolist(), "t": np.linspace(0.0, t_max, nt).tolist()}


def lambda_sensors(spec: CoeffSpec, layout: dict[str, Any]) -> np.ndarray:
    """lambda on the sensor lattice, flattened with x outer."""
    x = np.asarray(layout["x"])
    t = np.asarray(layout["t"])
    return spec.lam(x[:, None], t[None, :]).ravel()


def kernel_queries(grid: TriGrid, times, t_max: float) -> np.ndarray:
    """(len(times) * size, 3) trunk inputs (x, y, t) with time outer."""
    pts = grid.points()
    times = np.asarray(times, dtype=float)
    q = np.empty((len(times), len(pts), 3))
    q[:, :, :2] = pts[None]
    q[:, :, 2] = times[:, None]
    return q.reshape(-1, 3)


def make_kernel_operator(n_sensors: int, t_max: float, seed: int, **kw) -> DeepOperator:
    op = DeepOperator.init(n_sensors, 3, seed, kind=KERNEL, layout=ALIGNED, **kw)
    op.trunk_norm = Affine(np.zeros(3), np.array([1.0, 1.0, t_max]))
    return op


def make_feedback_operator(n_sensors: int, n_v: int, t_max: float, seed: int, **kw) -> DeepOperator:
    op = DeepOperator.init(n_sensors + n_v + 1, 1, seed, kind=FEEDBACK, layout=PAIRED, **kw)
    op.trunk_norm = Affine(np.zeros(1), np.array([t_max]))
    return op


def _check_time(op: DeepOperator, t):
    t_max = float(op.sensors.get("t_max", np.inf))
    t = np.asarray(t, dtype=float)
    if np.any(t < -1e-12) or np.any(t > t_max + 1e-9):
        raise DomainError(f"query time outside the trained range [0, {t_max}]")


def _kernel_predict(op: DeepOperator, sensors, times, points: np.ndarray, nodes) -> np.ndarray:
    """k at every (x, y) of ``points`` for each time, shape (len(times), len(points)).

    ``nodes`` gives the packed lattice index of each point, used to look up
    the mean field; it is required when the operator carries one.
    """
    times = np.atleast_1d(np.asarray(times, dtype=float))
    q = np.empty((len(times), len(points), 3))
    q[:, :, :2] = points[None]
    q[:, :, 2] = times[:, None]
    b = mlp_forward(op.branch, op.branch_norm.apply(np.atleast_2d(sensors)))
    tr = mlp_forward(op.trunk, op.trunk_norm.apply(q.reshape(-1, 3)))
    z = ((b @ tr.T)[0] + op.bias).reshape(len(times), len(points))
    if op.mean_knots is None:
        return z
    if nodes is None:
        raise ValueError("this operator is tied to its training lattice")
    return op.mean_field(times)[:, nodes] + op.node_scale(times)[:, nodes] * z


def _native_n(op: DeepOperator, n: int):
    native = op.sensors.get("n")
    if op.mean_knots is not None and native is not None and int(native) != n:
        raise ValueError(f"surrogate is defined on its {native}-node training lattice, not {n}")


def predict_kernel_slices(op: DeepOperator, sensors, times, grid: TriGrid) -> np.ndarray:
    """(len(times), n, n) raw surrogate kernels on ``grid``."""
    if op.kind != KERNEL:
        raise ValueError("not a kernel operator")
    _check_time(op, times)
    _native_n(op, grid.n)
    times = np.atleast_1d(np.asarray(times, dtype=float))
    vals = _kernel_predict(op, sensors, times, grid.points(), np.arange(grid.size))
    return grid.unpack(vals)


def predict_kernel_slice(op: DeepOperator, sensors, t: float, grid: TriGrid) -> KernelSlice:
    return KernelSlice(grid, predict_kernel_slices(op, sensors, [t], grid)[0], float(t))


def predict_gain_rows(op: DeepOperator, sensors, times, n: int) -> np.ndarray:
    """Surrogate k(1, y_j, t) for each time, shape (len(times), n)."""
    if op.kind != KERNEL:
        raise ValueError("not a kernel operator")
    _check_time(op, times)
    _native_n(op, n)
    y = np.linspace(0.0, 1.0, n)
    points = np.column_stack([np.ones(n), y])
    nodes = (n - 1) * n // 2 + np.arange(n)
    return _kernel_predict(op, sensors, times, points, nodes)


def feedback_inputs(sensors, v_samples, t, t_max: float) -> np.ndarray:
    sensors = np.asarray(sensors, dtype=float)
    v_samples = np.atleast_2d(np.asarray(v_samples, dtype=float))
    t = np.atleast_1d(np.asarray(t, dtype=float))
    rows = len(v_samples)
    return np.column_stack([np.broadcast_to(sensors, (rows, len(sensors))), v_samples,
                            np.broadcast_to(t, (rows,)) / t_max])


def predict_feedback(op: DeepOperator, sensors, v_samples, t):
    """Surrogate U for one state (returns float) or a stack of states (returns array)."""
    if op.kind != FEEDBACK:
        raise ValueError("not a feedback operator")
    v_samples = np.asarray(v_samples, dtype=float)
    n_v = int(op.sensors["n_v"])
    if v_samples.shape[-1] != n_v:
        raise ValueError(f"expected {n_v} state samples, got {v_samples.shape[-1]}")
    t_max = float(op.sensors["t_max"])
    _check_time(op, t)
    u = feedback_inputs(sensors, v_samples, t, t_max)
    tq = np.broadcast_to(np.atleast_1d(np.asarray(t, dtype=float)), (len(u),))[:, None]
    z = deeponet_forward(op, u, tq)
    out = op.target_norm.invert(np.atleast_1d(z))
    return float(out[0]) if v_samples.ndim == 1 else out


# ---------------------------------------------------------------------------
# checkpoints


def _paths(path):
    path = Path(path)
    return path.with_suffix(".json"), path.with_suffix(".bin")


def save_operator(op: DeepOperator, path) -> Path:
    """Manifest ``<stem>.json`` plus float64 little-endian blob ``<stem>.bin``.

    Blob order: branch (W, b per layer), trunk (W, b per layer), readout bias.
    """
    man_path, bin_path = _paths(path)
    blob = np.concatenate([p.ravel() for p in op.parameters()]).astype("<f8").tobytes()
    manifest = {
        "format_version": FORMAT_VERSION, "kind": op.kind, "layout": op.layout,
        "branch_sizes": op.branch.sizes, "trunk_sizes": op.trunk.sizes,
        "activation": op.branch.activation, "p": op.p,
        "branch_norm": op.branch_norm.to_dict(), "trunk_norm": op.trunk_norm.to_dict(),
        "target_norm": op.target_norm.to_dict(),
        "scale_times": None if op.scale_times is None else np.asarray(op.scale_times).tolist(),
        "scale_log": None if op.scale_log is None else np.asarray(op.scale_log).tolist(),
        "mean_knots": None if op.mean_knots is None else np.asarray(op.mean_knots).tolist(),
        "fixed_nodes": None if op.fixed_nodes is None else [int(i) for i in op.fixed_nodes],
        "sensors": op.sensors, "info": op.info,
        "parameter_order": "branch W0,b0,...; trunk W0,b0,...; bias",
        "sha256": hashlib.sha256(blob).hexdigest(),
    }
    bin_path.write_bytes(blob)
    man_path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return bin_path


def load_operator(path) -> DeepOperator:
    man_path, bin_path = _paths(path)
    manifest = json.loads(man_path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise ValueError("unsupported checkpoint format version")
    blob = bin_path.read_bytes()
    if hashlib.sha256(blob).hexdigest() != manifest["sha256"]:
        raise ValueError("checkpoint blob checksum mismatch")
    flat = np.frombuffer(blob, dtype="<f8")
    act = manifest["activation"]
    branch = MLP.zeros(manifest["branch_sizes"], act)
    trunk = MLP.zeros(manifest["trunk_sizes"], act)
    op = DeepOperator(branch, trunk, 0.0, kind=manifest["kind"], layout=manifest["layout"])
    params, pos = [], 0
    for p in op.parameters():
        params.append(flat[pos:pos + p.size].reshape(p.shape).copy())
        pos += p.size
    if pos != flat.size:
        raise ValueError("checkpoint blob size does not match the layer sizes")
    op.set_parameters(params)
    op.branch_norm = Affine.from_dict(manifest["branch_norm"])
    op.trunk_norm = Affine.from_dict(manifest["trunk_norm"])
    op.target_norm = Affine.from_dict(manifest["target_norm"])
    if manifest["scale_times"] is not None:
        op.scale_times = np.array(manifest["scale_times"])
        op.scale_log = np.array(manifest["scale_log"])
    if manifest.get("mean_knots") is not None:
        op.mean_knots = np.array(manifest["mean_knots"])
    if manifest.get("fixed_nodes") is not None:
        op.fixed_nodes = np.array(manifest["fixed_nodes"], dtype=int)
    op.sensors = manifest["sensors"]
    op.info = manifest["info"]
    return op
