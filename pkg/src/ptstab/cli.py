"""Command-line entry point: gen-data, train, simulate, verify, bench.

Exit codes: 0 success, 1 invalid input, 2 numerical failure (including
failed verification), 3 I/O or corrupted files.
"""
from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from pathlib import Path

import numpy as np

from . import analysis, dataset, kernel_solver, neural_operator, plant_sim, training
from .backstepping_control import StateVector, forward_transform, inverse_transform
from .core_grid import CoeffSpec, GainSchedule, SpaceGrid, TimeGrid, TriGrid

EXIT_OK, EXIT_INVALID, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def _scenario(p):
    g = p.add_argument_group("scenario")
    g.add_argument("--sigma", type=float, help="shape parameter of lambda (default 3.3)")
    g.add_argument("--T", type=float, help="prescribed time (default 8)")
    g.add_argument("--margin", type=float, help="stop at T - margin (default 0.05 T)")
    g.add_argument("--theta", type=float, help="diffusion coefficient (default 1)")
    g.add_argument("--q", type=float, help="Robin coefficient at x=0 (default 1)")
    g.add_argument("--dx", type=float, help="spatial step (default 0.05)")
    g.add_argument("--dt", type=float, help="time step (default 6.25e-4)")


def _common(p):
    p.add_argument("--config", help="JSON file with option values; flags override it")
    p.add_argument("--seed", type=int, help="random seed (falls back to $PTSTAB_SEED, then 0)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="ptstab", description="Prescribed-time backstepping of a reaction-diffusion "
                                                  "plant with neural-operator gains.")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen-data", help="generate a training corpus")
    _common(p)
    _scenario(p)
    p.add_argument("--kind", choices=["kernel", "feedback"], required=False, help="corpus type")
    p.add_argument("--n", type=int, help="number of sigma samples (kernel) or rollouts (feedback)")
    p.add_argument("--n-times", type=int, help="kernel slices stored per sample (default 65)")
    p.add_argument("--n-stored", type=int, help="states stored per rollout (default 50)")
    p.add_argument("--sigma-low", type=float, help="lower end of the sigma range (default 2)")
    p.add_argument("--sigma-high", type=float, help="upper end of the sigma range (default 4)")
    p.add_argument("--split", type=float, help="validation fraction (default 0.1)")
    p.add_argument("--name", help="file stem (default: the kind)")
    p.add_argument("--jobs", type=int, help="worker processes (default: logical cores)")
    p.add_argument("--out", help="output directory")

    p = sub.add_parser("train", help="train an operator on a corpus")
    _common(p)
    p.add_argument("--kind", choices=["kernel", "feedback"], help="operator to train")
    p.add_argument("--data", help="dataset manifest (<name>.manifest.json)")
    p.add_argument("--epochs", type=int, help="training epochs (default 200)")
    p.add_argument("--batch-size", type=int, help="minibatch size (default 32 kernel, 64 feedback)")
    p.add_argument("--query-batch", type=int,
                   help="query points per kernel step, 0 for all (default 2000)")
    p.add_argument("--lr", type=float, help="initial step size (default 3e-3 kernel, 1e-3 feedback)")
    p.add_argument("--lr-final", type=float, help="final step size (default 1e-4 kernel, 2e-5 feedback)")
    p.add_argument("--out", help="checkpoint path (writes <stem>.json and <stem>.bin)")
    p.add_argument("--log-every", type=int, help="print the loss every N epochs (default 50)")

    p = sub.add_parser("simulate", help="run the plant under a controller")
    _common(p)
    _scenario(p)
    p.add_argument("--controller", choices=["open-loop", "analytic", "no-kernel", "no-feedback", "perturbed"],
                   help="boundary controller (default analytic)")
    p.add_argument("--checkpoint", help="trained operator for no-kernel / no-feedback")
    p.add_argument("--eps", type=float, help="injected control error for 'perturbed' (default 0)")
    p.add_argument("--amplitude", type=float, help="initial state a x (1 - x) (default 10.25)")
    p.add_argument("--stride", type=int, help="write every N-th step to the CSVs (default 1)")
    p.add_argument("--run-id", help="file prefix (default: the controller name)")
    p.add_argument("--out", help="output directory (default .)")

    p = sub.add_parser("verify", help="run the verification suite")
    _common(p)
    p.add_argument("--quick", action="store_true", help="coarse settings for a fast check")
    p.add_argument("--epsilon-scaling", action="store_true", help="include the perturbed-control sweep")
    p.add_argument("--data", action="append", help="dataset manifest to checksum (repeatable)")
    p.add_argument("--checkpoint", action="append", help="checkpoint to checksum (repeatable)")
    p.add_argument("--kernel-file", action="append", help="kernel trajectory to checksum (repeatable)")

    p = sub.add_parser("bench", help="time the analytic kernel solve against the surrogate")
    _common(p)
    p.add_argument("--dx", help="comma-separated spatial steps (default 0.01,0.005)")
    p.add_argument("--checkpoint", help="trained kernel operator")
    p.add_argument("--repetitions", type=int, help="timed repetitions per row (default 5)")
    p.add_argument("--bench-dt", type=float, help="time step of the benchmarked trajectory (default 0.05)")
    p.add_argument("--sigma", type=float, help="shape parameter (default 3.3)")
    p.add_argument("--out", help="CSV path (default bench.csv)")
    return parser


DEFAULTS = {
    "sigma": 3.3, "T": 8.0, "margin": None, "theta": 1.0, "q": 1.0, "dx": 0.05, "dt": 6.25e-4,
    "kind": "kernel", "n": None, "n_times": 65, "n_stored": 50, "sigma_low": 2.0, "sigma_high": 4.0,
    "split": 0.1, "name": None, "jobs": None, "out": None,
    "data": None, "epochs": 200, "batch_size": None, "query_batch": 2000, "lr": None, "lr_final": None, "log_every": 50,
    "controller": "analytic", "checkpoint": None, "eps": 0.0, "amplitude": 10.25, "stride": 1,
    "run_id": None, "quick": False, "epsilon_scaling": False, "kernel_file": None,
    "repetitions": 5, "bench_dt": 0.05,
}


def resolve(argv=None) -> argparse.Namespace:
    parser = build_parser()
    args = parser.parse_args(argv)
    file_cfg = {}
    if args.config:
        try:
            file_cfg = json.loads(Path(args.config).read_text())
        except OSError as exc:
            raise OSError(f"cannot read config {args.config}: {exc}") from exc
        except json.JSONDecodeError as exc:
            raise UsageError(f"config {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(file_cfg, dict):
            raise UsageError("config file must hold a JSON object")
    known = set(vars(args))
    for key in file_cfg:
        if key.replace("-", "_") not in known:
            raise UsageError(f"unknown config key {key!r} for {args.command}")
    for key, value in vars(args).items():
        if value is None or value is False:
            cfg_key = key if key in file_cfg else key.replace("_", "-")
            if cfg_key in file_cfg:
                setattr(args, key, file_cfg[cfg_key])
            elif key in DEFAULTS and value is None:
                setattr(args, key, DEFAULTS[key])
    if args.seed is None:
        env = os.environ.get("PTSTAB_SEED")
        try:
            args.seed = int(env) if env is not None else 0
        except ValueError:
            raise UsageError(f"PTSTAB_SEED must be an integer, got {env!r}")
    if getattr(args, "margin", 1) is None:
        args.margin = 0.05 * args.T
    return args


def config_hash(args) -> str:
    payload = {k: v for k, v in sorted(vars(args).items()) if k not in ("config", "out")}
    return hashlib.sha256(json.dumps(payload, sort_keys=True, default=str).encode()).hexdigest()[:16]


def _positive(args, *names):
    for name in names:
        value = getattr(args, name, None)
        if value is None or not value > 0:
            raise UsageError(f"--{name.replace('_', '-')} must be positive, got {value!r}")


def _scenario_objects(args):
    _positive(args, "T", "margin", "theta", "q", "dx", "dt")
    if args.margin >= args.T:
        raise UsageError("--margin must be smaller than --T")
    grid = SpaceGrid.from_dx(args.dx)
    tg = TimeGrid(args.dt, args.T, args.margin)
    spec = CoeffSpec.chebyshev_blowup(args.sigma, args.T, theta=args.theta, q=args.q)
    return spec, GainSchedule.prescribed(args.T), grid, tg


def _out_dir(path) -> Path:
    out = Path(path or ".")
    out.mkdir(parents=True, exist_ok=True)
    return out


# ---------------------------------------------------------------------------
# subcommands


def cmd_gen_data(args) -> int:
    if not args.out:
        raise UsageError("--out is required")
    _positive(args, "T", "margin", "theta", "q", "dx", "dt")
    n = SpaceGrid.from_dx(args.dx).n
    jobs = args.jobs or os.cpu_count() or 1
    common = dict(sigma_low=args.sigma_low, sigma_high=args.sigma_high, n=n, dt=args.dt, T=args.T,
                  margin=args.margin, theta=args.theta, q=args.q, seed=args.seed, split=args.split)
    if args.kind == "kernel":
        cfg = dataset.KernelDataConfig(n_samples=args.n or 200, n_times=args.n_times,
                                       name=args.name or "kernel", **common)
        man = dataset.generate_kernel_dataset(cfg, _out_dir(args.out), jobs)
    else:
        cfg = dataset.FeedbackDataConfig(n_rollouts=args.n or 100, n_stored=args.n_stored,
                                         name=args.name or "feedback", **common)
        man = dataset.generate_feedback_dataset(cfg, _out_dir(args.out), jobs)
    print(f"wrote {man['path']}: {man['count']} records, {len(man['failures'])} failures")
    for f in man["failures"]:
        print(f"  failed sample {f['index']} (sigma={f['sigma']:.4f}): {f['error']}")
    return EXIT_OK


def cmd_train(args) -> int:
    if not args.data:
        raise UsageError("--data is required")
    if not args.out:
        raise UsageError("--out is required")
    ds = dataset.load_dataset(args.data)
    want = dataset.KERNEL_PAIRS if args.kind == "kernel" else dataset.FEEDBACK_TRIPLES
    if ds.kind != want:
        raise UsageError(f"--kind {args.kind} needs a {want} dataset, got {ds.kind}")
    is_kernel = args.kind == "kernel"
    batch = args.batch_size or (32 if is_kernel else 64)
    lr = args.lr or (3e-3 if is_kernel else 1e-3)
    lr_final = args.lr_final or (1e-4 if is_kernel else 2e-5)
    cfg = neural_operator.TrainConfig(epochs=args.epochs, batch_size=batch, query_batch=args.query_batch,
                                      lr=lr, lr_final=lr_final, seed=args.seed, split=ds.manifest["split"])

    seen = []

    def log(epoch, loss, vloss):
        seen.append(loss)
        if epoch % args.log_every == 0 or epoch == cfg.epochs - 1:
            ma = float(np.mean(seen[-50:]))
            print(f"epoch {epoch:5d}  train_mse {loss:.4e}  val_mse {vloss:.4e}  ma50 {ma:.4e}", flush=True)

    fit = training.fit_kernel_operator if args.kind == "kernel" else training.fit_feedback_operator
    rep = fit(ds, cfg, log=log)
    path = neural_operator.save_operator(rep.op, args.out)
    ma = neural_operator.moving_average(rep.result.history, 50)
    print(f"final train MSE {rep.metrics['final_train_mse']:.4e}")
    if "val_l2_field_error_median" in rep.metrics:
        print(f"validation L2 field error: median {rep.metrics['val_l2_field_error_median']:.4e}, "
              f"max {rep.metrics['val_l2_field_error_max']:.4e}")
    if "val_max_abs_error" in rep.metrics:
        print(f"validation max |U_hat - U| {rep.metrics['val_max_abs_error']:.4e}, "
              f"relative L2 {rep.metrics['val_relative_l2']:.4e}")
    print(f"moving-average (50) loss non-increasing: {bool(np.all(np.diff(ma) <= 0))}")
    print(f"checkpoint {path}")
    return EXIT_OK


def _controller(args):
    name = args.controller
    if name in ("no-kernel", "no-feedback"):
        if not args.checkpoint:
            raise UsageError(f"--controller {name} needs --checkpoint")
        op = neural_operator.load_operator(args.checkpoint)
        want = neural_operator.KERNEL if name == "no-kernel" else neural_operator.FEEDBACK
        if op.kind != want:
            raise UsageError(f"checkpoint holds a {op.kind} operator, {name} needs {want}")
        return plant_sim.NOKernel(op) if name == "no-kernel" else plant_sim.NOFeedback(op)
    if name == "open-loop":
        return plant_sim.OpenLoop()
    if name == "perturbed":
        if args.eps < 0:
            raise UsageError("--eps must be nonnegative")
        return plant_sim.PerturbedExact(plant_sim.AnalyticKernel(), args.eps, args.seed)
    return plant_sim.AnalyticKernel()


def cmd_simulate(args) -> int:
    spec, sched, grid, tg = _scenario_objects(args)
    ctrl = _controller(args)
    x = grid.nodes
    v0 = StateVector(grid, args.amplitude * x * (1 - x))
    traj = plant_sim.simulate(spec, sched, ctrl, tg, v0)
    tri = TriGrid(grid.n)
    ktraj = kernel_solver.solve_kernel_trajectory(spec, sched, tri, tg)
    ltraj = kernel_solver.solve_inverse_kernel_trajectory(spec, sched, tri, tg)
    eps_hat = 0.0
    extra = {}
    if args.controller == "no-kernel":
        sensors = neural_operator.lambda_sensors(spec, ctrl.op.sensors)
        khat = neural_operator.predict_gain_rows(ctrl.op, sensors, traj.times, grid.n)
        diff = np.abs(khat - ktraj.gain_rows()[:len(traj)])
        eps_hat = float(np.max(np.sqrt(np.sum(diff ** 2, axis=1) * grid.dx)))
        extra["gain_error_l2_max"] = eps_hat
    elif args.controller == "perturbed":
        eps_hat = args.eps
    report = analysis.decay_envelope_check(traj, ktraj, ltraj, sched, eps_hat)
    res = plant_sim.target_residual(traj, ktraj, sched, spec.theta, spec.q)
    report.extra.update(extra)
    report.extra.update({"controller": args.controller, "max_boundary_residual": res.max_boundary,
                         "max_state_norm": res.max_state_norm,
                         "practical_bound": analysis.practical_residual_bound(eps_hat, args.T, report.C_vw)})
    out = _out_dir(args.out)
    run_id = args.run_id or args.controller
    h = config_hash(args)
    plant_sim.export_trajectory(traj, out, run_id, h, args.stride)
    report.write(out / f"{run_id}_report.json", out / f"{run_id}_envelope.csv", h)
    print(json.dumps({"run_id": run_id, "blown_up": traj.blown_up, "terminal_ratio": traj.terminal_ratio(),
                      "steps": len(traj) - 1, "envelope_pass": report.passed,
                      "max_boundary_residual": res.max_boundary}, sort_keys=True))
    return EXIT_OK


def _check(name, ok, detail):
    print(f"[{'PASS' if ok else 'FAIL'}] {name}: {detail}", flush=True)
    return ok


def cmd_verify(args) -> int:
    results = []
    for path in args.data or []:
        try:
            dataset.load_dataset(path)
            results.append(_check(f"checksum {path}", True, "ok"))
        except (dataset.DatasetCorrupt, dataset.DatasetFormatError) as exc:
            _check(f"checksum {path}", False, str(exc))
            return EXIT_IO
    for path in args.checkpoint or []:
        try:
            neural_operator.load_operator(path)
            results.append(_check(f"checksum {path}", True, "ok"))
        except ValueError as exc:
            _check(f"checksum {path}", False, str(exc))
            return EXIT_IO
    for path in args.kernel_file or []:
        try:
            kernel_solver.load_trajectory(path)
            results.append(_check(f"checksum {path}", True, "ok"))
        except ValueError as exc:
            _check(f"checksum {path}", False, str(exc))
            return EXIT_IO

    res = {}
    for n in (26, 51) if args.quick else (51, 101):
        grid = TriGrid(n)
        gam = np.full(n, 0.5)
        k = kernel_solver.solve_stationary_kernel(gam, 1.0, 1.0, grid)
        l = kernel_solver.solve_stationary_kernel(gam, 1.0, 1.0, grid, kind=kernel_solver.INVERSE)
        res[n] = (kernel_solver.reciprocity_residual(k, l), k, l)
    (nc, (rc, _, _)), (nf, (rf, k, l)) = sorted(res.items())
    results.append(_check("reciprocity", rf < 1e-2 and rf < rc, f"n={nc}: {rc:.3e}, n={nf}: {rf:.3e}"))

    x = k.grid.space.nodes
    v = StateVector(k.grid.space, np.sin(np.pi * x) + x ** 2)
    back = inverse_transform(forward_transform(v, k), l)
    err = float(np.max(np.abs(back.values - v.values)))
    results.append(_check("round trip", err < 1e-2, f"max error {err:.3e} at n={nf}"))

    dt = 2.5e-3 if args.quick else 6.25e-4
    spec = CoeffSpec.chebyshev_blowup(3.3, 8.0)
    sched = GainSchedule.prescribed(8.0)
    sgrid = SpaceGrid(21)
    tg = TimeGrid(dt, 8.0, 0.4)
    v0 = plant_sim.default_initial_state(sgrid)
    ctrl = plant_sim.AnalyticKernel()
    closed = plant_sim.simulate(spec, sched, ctrl, tg, v0)
    opened = plant_sim.simulate(spec, sched, plant_sim.OpenLoop(), tg, v0)
    growth = float(opened.l2_norms().max() / opened.l2_norms()[0])
    results.append(_check("closed loop", closed.terminal_ratio() <= 1e-2 and growth > 10,
                          f"terminal ratio {closed.terminal_ratio():.3e}, open-loop growth {growth:.3e}"))
    rr = plant_sim.target_residual(closed, ctrl.ktraj, sched, 1.0, 1.0)
    results.append(_check("target boundary", rr.max_boundary <= 1e-3 * rr.max_state_norm,
                          f"max |w(1,t)| {rr.max_boundary:.3e}, max ||v|| {rr.max_state_norm:.3e}"))
    ltraj = kernel_solver.solve_inverse_kernel_trajectory(spec, sched, TriGrid(21), tg)
    rep = analysis.decay_envelope_check(closed, ctrl.ktraj, ltraj, sched)
    results.append(_check("decay envelope", rep.passed, f"terminal ratio {rep.terminal_ratio:.3e}, "
                                                         f"C_vw {rep.C_vw:.3e}"))
    if args.epsilon_scaling or not args.quick:
        sweep = analysis.epsilon_scaling(spec, sched, ctrl, tg, v0, seed=args.seed, C=rep.C_vw)
        print("eps,terminal_l2,practical_bound")
        for e, tnorm, b in zip(sweep.eps, sweep.terminal, sweep.bounds):
            print(f"{e:.0e},{tnorm:.6e},{b:.6e}")
        results.append(_check("epsilon scaling", abs(sweep.slope - 1.0) <= 0.3, f"slope {sweep.slope:.3f}"))
    return EXIT_OK if all(results) else EXIT_NUMERIC


def cmd_bench(args) -> int:
    if not args.checkpoint:
        raise UsageError("--checkpoint is required")
    try:
        dxs = [float(s) for s in str(args.dx or "0.01,0.005").split(",") if s.strip()]
    except ValueError:
        raise UsageError(f"--dx must be a comma-separated list of numbers, got {args.dx!r}")
    if not dxs or any(d <= 0 or d > 0.5 for d in dxs):
        raise UsageError("--dx values must lie in (0, 0.5]")
    op = neural_operator.load_operator(args.checkpoint)
    if op.kind != neural_operator.KERNEL:
        raise UsageError("bench needs a kernel operator checkpoint")
    table = analysis.benchmark_speedup(dxs, op, args.repetitions, sigma=args.sigma or 3.3,
                                       dt=args.bench_dt)
    path = table.write(args.out or "bench.csv", config_hash(args))
    print("dx,analytic_s,surrogate_s,speedup")
    for row in table.rows:
        print(",".join(f"{v:.6g}" for v in row))
    print(f"wrote {path}")
    return EXIT_OK


COMMANDS = {"gen-data": cmd_gen_data, "train": cmd_train, "simulate": cmd_simulate,
            "verify": cmd_verify, "bench": cmd_bench}


def main(argv=None) -> int:
    try:
        args = resolve(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"ptstab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (dataset.DatasetCorrupt, dataset.DatasetFormatError) as exc:
        print(f"ptstab: corrupted input: {exc}", file=sys.stderr)
        return EXIT_IO
    except OSError as exc:
        print(f"ptstab: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ArithmeticError, kernel_solver.KernelIterationError) as exc:
        print(f"ptstab: numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        print(f"ptstab: error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
