"""Fit the kernel and feedback operators to stored datasets."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Any, Callable

import numpy as np

from .dataset import FEEDBACK_TRIPLES, KERNEL_PAIRS, Dataset
from .neural_operator import (ALIGNED, PAIRED, Affine, Batch, DeepOperator, TrainConfig,
                       TrainResult, kernel_queries, make_feedback_operator,
                       make_kernel_operator, mlp_forward, predict_kernel_slices, train)
from .core_grid import TriGrid


@dataclass
class FitReport:
    result: TrainResult
    metrics: dict[str, Any]

    @property
    def op(self) -> DeepOperator:
        return self.result.op


def _kernel_parts(ds: Dataset):
    man = ds.manifest
    grid = TriGrid(man["config"]["n"])
    times = np.asarray(man["times"])
    queries = kernel_queries(grid, times, man["t_max"])
    return grid, times, queries


def kernel_field_errors(op: DeepOperator, ds: Dataset, rows) -> np.ndarray:
    """L2(Omega) error of the surrogate per (record, training time), shape (len(rows), n_times)."""
    grid, times, _ = _kernel_parts(ds)
    out = np.empty((len(rows), len(times)))
    for r, row in enumerate(rows):
        pred = predict_kernel_slices(op, ds.inputs[row], times, grid)
        true = grid.unpack(ds.targets[row].reshape(len(times), grid.size))
        out[r] = grid.l2_norm(pred - true)
    return out


def kernel_output_map(targets: np.ndarray, n_times: int, size: int, floor: float = 1e-9):
    """Per-node mean m and log spread log s of a (records, n_times * size) block.

    s is the standard deviation over records at each (time, node), floored at
    ``floor`` times the largest one of that time.  Nodes with no spread at
    any time are returned as fixed: the mean reproduces them exactly.
    """
    K = targets.reshape(len(targets), n_times, size)
    mean = K.mean(axis=0)
    sd = K.std(axis=0)
    top = sd.max(axis=1, keepdims=True)
    fixed = np.nonzero(np.all(sd <= 1e-14 * np.maximum(top, 1e-300), axis=0))[0]
    sd = np.maximum(sd, np.maximum(floor * top, 1e-300))
    return np.log(sd), mean, fixed


def fit_kernel_operator(ds: Dataset, cfg: TrainConfig, hidden=(64, 64, 64), p: int = 32,
                        log: Callable | None = None) -> FitReport:
    """Train the kernel head on k = m(node, t) + s(node, t) z.

    The network learns z, each kernel standardised node by node against the
    training records; fixed nodes are left out of the loss.
    """
    if ds.kind != KERNEL_PAIRS:
        raise ValueError(f"expected a {KERNEL_PAIRS} dataset, got {ds.kind}")
    man = ds.manifest
    grid, times, queries = _kernel_parts(ds)
    tr_idx, va_idx = ds.train_idx, ds.val_idx
    op = make_kernel_operator(ds.inputs.shape[1], man["t_max"], cfg.seed, hidden=hidden, p=p)
    op.branch_norm = Affine.standardize(ds.inputs[tr_idx])
    op.scale_times = times
    op.scale_log, op.mean_knots, op.fixed_nodes = kernel_output_map(
        ds.targets[tr_idx], len(times), grid.size)
    op.sensors = dict(man["sensor_layout"], t_max=man["t_max"], n=grid.n)
    active = np.ones((len(times), grid.size), dtype=bool)
    active[:, op.fixed_nodes] = False
    active = active.ravel()
    scale = np.exp(op.scale_log).ravel()[active]
    shift = op.mean_knots.ravel()[active]
    y = op.trunk_norm.apply(queries[active])

    def batch(rows):
        return Batch(op.branch_norm.apply(ds.inputs[rows]), y,
                     (ds.targets[rows][:, active] - shift) / scale, ALIGNED)

    result = train(op, batch(tr_idx), cfg, batch(va_idx) if len(va_idx) else None, log)
    metrics = {"final_train_mse": result.final_train_mse, "final_val_mse": result.final_val_mse,
               "train_seconds": result.seconds, "fixed_nodes": int(len(op.fixed_nodes))}
    if len(va_idx):
        err = kernel_field_errors(op, ds, va_idx)
        metrics.update({"val_l2_field_error_max": float(err.max()),
                        "val_l2_field_error_median": float(np.median(err))})
    op.info.update({k: v for k, v in metrics.items() if k != "train_seconds"})
    return FitReport(result, metrics)


def fit_feedback_operator(ds: Dataset, cfg: TrainConfig, hidden=(64, 64, 64), p: int = 32,
                          log: Callable | None = None) -> FitReport:
    if ds.kind != FEEDBACK_TRIPLES:
        raise ValueError(f"expected a {FEEDBACK_TRIPLES} dataset, got {ds.kind}")
    man = ds.manifest
    n_v = man["n_v"]
    t_max = man["t_max"]
    n_s = ds.inputs.shape[1] - n_v - 1
    tr_idx, va_idx = ds.train_idx, ds.val_idx
    op = make_feedback_operator(n_s, n_v, t_max, cfg.seed, hidden=hidden, p=p)
    raw = ds.inputs.copy()
    raw[:, -1] /= t_max
    op.branch_norm = Affine.standardize(raw[tr_idx])
    op.target_norm = Affine.standardize(ds.targets[tr_idx])
    op.sensors = dict(man["sensor_layout"], t_max=t_max, n_v=n_v)

    def batch(rows):
        return Batch(op.branch_norm.apply(raw[rows]), op.trunk_norm.apply(ds.inputs[rows, -1:]),
                     op.target_norm.apply(ds.targets[rows])[:, 0], PAIRED)

    result = train(op, batch(tr_idx), cfg, batch(va_idx) if len(va_idx) else None, log)
    metrics = {"final_train_mse": result.final_train_mse, "final_val_mse": result.final_val_mse,
               "train_seconds": result.seconds}
    if len(va_idx):
        vb = batch(va_idx)
        z = np.sum(mlp_forward(op.branch, vb.u) * mlp_forward(op.trunk, vb.y), axis=-1) + op.bias
        U = op.target_norm.invert(z[:, None])[:, 0]
        true = ds.targets[va_idx, 0]
        metrics.update({"val_max_abs_error": float(np.max(np.abs(U - true))),
                        "val_relative_l2": float(np.linalg.norm(U - true) / np.linalg.norm(true))})
    op.info.update({k: v for k, v in metrics.items() if k != "train_seconds"})
    return FitReport(result, metrics)
