"""Training corpora for the kernel and feedback operators.

On disk a dataset is three files:

  <name>.manifest.json   description, record layout, checksums
  <name>.inputs.bin      float64 LE, one record per row
  <name>.targets.bin     float64 LE, one record per row

Kernel records: input = lambda sensors; target = packed kernel slices at the
training times, time outer.  Feedback records: input = [lambda sensors,
v samples, t]; target = U.
"""
from __future__ import annotations

import hashlib
import json
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .backstepping_control import GainRow, StateVector, control_U
from .neural_operator import lambda_sensor_layout, lambda_sensors
from .core_grid import CoeffSpec, GainSchedule, SpaceGrid, TimeGrid, TriGrid
from .kernel_solver import KernelTrajectory, solve_kernel_trajectory

KERNEL_PAIRS = "kernel_pairs"
FEEDBACK_TRIPLES = "feedback_triples"
FORMAT_VERSION = 1
DIAGONAL_TOL = 1e-10


class DatasetCorrupt(ValueError):
    pass


class DatasetFormatError(ValueError):
    pass


def sample_sigma(seed: int, n: int, low: float = 2.0, high: float = 4.0) -> np.ndarray:
    if not low < high:
        raise ValueError(f"need low < high, got [{low}, {high})")
    if n < 1:
        raise ValueError("n must be >= 1")
    return np.random.default_rng(seed).uniform(low, high, size=n)


@dataclass
class KernelDataConfig:
    n_samples: int = 200
    sigma_low: float = 2.0
    sigma_high: float = 4.0
    n: int = 21
    dt: float = 6.25e-4
    T: float = 8.0
    margin: float = 0.4
    theta: float = 1.0
    q: float = 1.0
    n_times: int = 17
    sweeps: int = 6
    seed: int = 0
    split: float = 0.1
    name: str = "kernel"

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.T, self.margin)

    def time_indices(self) -> np.ndarray:
        tg = self.time_grid()
        return np.unique(np.rint(np.linspace(0, tg.n_steps, self.n_times)).astype(int))


@dataclass
class FeedbackDataConfig:
    n_rollouts: int = 100
    n_stored: int = 50
    sigma_low: float = 2.0
    sigma_high: float = 4.0
    amp_low: float = 1.0
    amp_high: float = 20.0
    n: int = 21
    n_v: int = 21
    dt: float = 6.25e-4
    T: float = 8.0
    margin: float = 0.4
    theta: float = 1.0
    q: float = 1.0
    sweeps: int = 6
    seed: int = 0
    split: float = 0.1
    name: str = "feedback"

    def time_grid(self) -> TimeGrid:
        return TimeGrid(self.dt, self.T, self.margin)

    def stored_indices(self) -> np.ndarray:
        tg = self.time_grid()
        return np.unique(np.rint(np.linspace(0, tg.n_steps, self.n_stored)).astype(int))


def _validate_common(cfg):
    for name in ("theta", "q", "dt"):
        if not getattr(cfg, name) > 0:
            raise ValueError(f"{name} must be positive")
    if not 0 < cfg.split < 1:
        raise ValueError("split must lie in (0, 1)")
    cfg.time_grid()


# ---------------------------------------------------------------------------
# per-sample workers (module level so they can be pickled)


def _kernel_sample(args):
    cfg, sigma = args
    tg = cfg.time_grid()
    spec = CoeffSpec.chebyshev_blowup(sigma, cfg.T, theta=cfg.theta, q=cfg.q)
    sched = GainSchedule.prescribed(cfg.T)
    grid = TriGrid(cfg.n)
    layout = lambda_sensor_layout(tg.stop)
    traj = solve_kernel_trajectory(spec, sched, grid, tg, sweeps=cfg.sweeps,
                                   indices=cfg.time_indices())
    x = grid.space.nodes
    for m, t in enumerate(traj.times):
        gamma = spec.lam(x, t) + sched.c(t)
        bad = traj.slice(m).diagonal_violation(gamma, cfg.theta)
        if bad > DIAGONAL_TOL:
            raise ValueError(f"diagonal condition violated by {bad:.2e} at t={t}")
    return lambda_sensors(spec, layout), grid.pack(traj.values).ravel()


def _feedback_sample(args):
    from .plant_sim import AnalyticKernel, simulate

    cfg, sigma, amp = args
    tg = cfg.time_grid()
    spec = CoeffSpec.chebyshev_blowup(sigma, cfg.T, theta=cfg.theta, q=cfg.q)
    sched = GainSchedule.prescribed(cfg.T)
    grid = SpaceGrid(cfg.n)
    x = grid.nodes
    ctrl = AnalyticKernel(sweeps=cfg.sweeps)
    traj = simulate(spec, sched, ctrl, tg, StateVector(grid, amp * x * (1 - x)))
    if traj.blown_up:
        raise ValueError("closed-loop rollout blew up")
    layout = lambda_sensor_layout(tg.stop)
    sensors = lambda_sensors(spec, layout)
    xs = np.linspace(0.0, 1.0, cfg.n_v)
    inputs, targets = [], []
    for m in cfg.stored_indices():
        v = traj.state(m)
        U = control_U(GainRow(grid, ctrl.ktraj.values[m, -1], v.t), v)
        inputs.append(np.concatenate([sensors, np.interp(xs, x, v.values), [v.t]]))
        targets.append(U)
    return np.array(inputs), np.array(targets)


def _run(worker, tasks, jobs: int):
    """Evaluate ``worker`` on every task; results (or exceptions) in task order."""
    results = []
    if jobs <= 1:
        for t in tasks:
            try:
                results.append(worker(t))
            except Exception as exc:  # recorded per sample
                results.append(exc)
        return results
    with ProcessPoolExecutor(max_workers=jobs) as pool:
        futures = [pool.submit(worker, t) for t in tasks]
        for f in futures:
            try:
                results.append(f.result())
            except Exception as exc:
                results.append(exc)
    return results


# ---------------------------------------------------------------------------
# writing / reading


def _write(out_dir, name, manifest, inputs, targets) -> Path:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    in_blob = np.ascontiguousarray(inputs, dtype="<f8").tobytes()
    tg_blob = np.ascontiguousarray(targets, dtype="<f8").tobytes()
    manifest.update({
        "format_version": FORMAT_VERSION,
        "files": {"inputs": f"{name}.inputs.bin", "targets": f"{name}.targets.bin"},
        "sha256": {"inputs": hashlib.sha256(in_blob).hexdigest(),
                   "targets": hashlib.sha256(tg_blob).hexdigest()},
    })
    (out_dir / f"{name}.inputs.bin").write_bytes(in_blob)
    (out_dir / f"{name}.targets.bin").write_bytes(tg_blob)
    path = out_dir / f"{name}.manifest.json"
    path.write_text(json.dumps(manifest, indent=1, sort_keys=True))
    return path


def generate_kernel_dataset(cfg: KernelDataConfig, out_dir, jobs: int = 1) -> dict[str, Any]:
    _validate_common(cfg)
    tg = cfg.time_grid()
    sigmas = sample_sigma(cfg.seed, cfg.n_samples, cfg.sigma_low, cfg.sigma_high)
    results = _run(_kernel_sample, [(cfg, float(s)) for s in sigmas], jobs)
    inputs, targets, kept, failures = [], [], [], []
    for i, (s, r) in enumerate(zip(sigmas, results)):
        if isinstance(r, Exception):
            failures.append({"index": i, "sigma": float(s), "error": str(r)})
            continue
        inputs.append(r[0])
        targets.append(r[1])
        kept.append(i)
    if not kept:
        raise RuntimeError("every kernel sample failed")
    inputs = np.array(inputs)
    targets = np.array(targets)
    grid = TriGrid(cfg.n)
    times = cfg.time_indices() * tg.dt
    manifest = {
        "kind": KERNEL_PAIRS, "config": asdict(cfg), "count": len(kept),
        "sigma": [float(sigmas[i]) for i in kept], "groups": kept, "failures": failures,
        "sensor_layout": lambda_sensor_layout(tg.stop), "t_max": tg.stop,
        "times": times.tolist(), "tri_size": grid.size,
        "input_stride": inputs.shape[1], "target_stride": targets.shape[1],
        "input_fields": ["lambda sensors (x outer, t inner)"],
        "target_fields": ["kernel slices at 'times', each packed lower-triangular row-major"],
        "split": cfg.split, "seed": cfg.seed,
    }
    path = _write(out_dir, cfg.name, manifest, inputs, targets)
    manifest["path"] = str(path)
    return manifest


def generate_feedback_dataset(cfg: FeedbackDataConfig, out_dir, jobs: int = 1) -> dict[str, Any]:
    _validate_common(cfg)
    if not cfg.amp_low < cfg.amp_high:
        raise ValueError("need amp_low < amp_high")
    tg = cfg.time_grid()
    rng = np.random.default_rng(cfg.seed)
    sigmas = rng.uniform(cfg.sigma_low, cfg.sigma_high, size=cfg.n_rollouts)
    amps = rng.uniform(cfg.amp_low, cfg.amp_high, size=cfg.n_rollouts)
    tasks = [(cfg, float(s), float(a)) for s, a in zip(sigmas, amps)]
    results = _run(_feedback_sample, tasks, jobs)
    inputs, targets, groups, failures = [], [], [], []
    for i, r in enumerate(results):
        if isinstance(r, Exception):
            failures.append({"index": i, "sigma": float(sigmas[i]), "error": str(r)})
            continue
        inputs.append(r[0])
        targets.append(r[1])
        groups += [i] * len(r[1])
    if not inputs:
        raise RuntimeError("every rollout failed")
    inputs = np.concatenate(inputs)
    targets = np.concatenate(targets)[:, None]
    layout = lambda_sensor_layout(tg.stop)
    manifest = {
        "kind": FEEDBACK_TRIPLES, "config": asdict(cfg), "count": len(targets),
        "rollouts": len(set(groups)), "sigma": sigmas.tolist(), "amplitude": amps.tolist(),
        "groups": groups, "failures": failures, "sensor_layout": layout, "t_max": tg.stop,
        "n_v": cfg.n_v, "input_stride": inputs.shape[1], "target_stride": 1,
        "input_fields": ["lambda sensors (99)", f"v samples ({cfg.n_v})", "t"],
        "target_fields": ["U"], "split": cfg.split, "seed": cfg.seed,
    }
    path = _write(out_dir, cfg.name, manifest, inputs, targets)
    manifest["path"] = str(path)
    return manifest


@dataclass
class Dataset:
    kind: str
    inputs: np.ndarray
    targets: np.ndarray
    groups: np.ndarray
    manifest: dict[str, Any]
    train_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))
    val_idx: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=int))

    def __len__(self):
        return len(self.inputs)


def split_groups(groups, fraction: float, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Record indices for (train, validation); whole groups go to one side."""
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    perm = np.random.default_rng(seed).permutation(len(uniq))
    n_val = min(max(1, int(round(fraction * len(uniq)))), len(uniq) - 1) if len(uniq) > 1 else 0
    val_groups = uniq[perm[:n_val]]
    is_val = np.isin(groups, val_groups)
    return np.nonzero(~is_val)[0], np.nonzero(is_val)[0]


def load_dataset(path) -> Dataset:
    path = Path(path)
    if path.is_dir():
        raise ValueError("expected a manifest path, got a directory")
    manifest = json.loads(path.read_text())
    if manifest.get("format_version") != FORMAT_VERSION:
        raise DatasetFormatError(f"unsupported dataset format {manifest.get('format_version')!r}")
    arrays = {}
    for key in ("inputs", "targets"):
        blob = (path.parent / manifest["files"][key]).read_bytes()
        if hashlib.sha256(blob).hexdigest() != manifest["sha256"][key]:
            raise DatasetCorrupt(f"checksum mismatch for {manifest['files'][key]}")
        stride = manifest["input_stride" if key == "inputs" else "target_stride"]
        data = np.frombuffer(blob, dtype="<f8")
        if data.size != manifest["count"] * stride:
            raise DatasetCorrupt(f"{key} blob holds {data.size} values, expected {manifest['count'] * stride}")
        arrays[key] = data.reshape(manifest["count"], stride).copy()
    groups = np.asarray(manifest["groups"])
    tr, va = split_groups(groups, manifest["split"], manifest["seed"])
    return Dataset(manifest["kind"], arrays["inputs"], arrays["targets"], groups, manifest, tr, va)
