"""Command-line front end: ``goalfem train | eval | reproduce``.

Exit codes: 0 on success, 2 for configuration or input errors, 3 when a
factorization or the optimizer fails.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict
from datetime import datetime, timezone
from pathlib import Path

import numpy as np

from .assembly import assemble_load
from .problems import (build_variant_space, benchmark_catalog, get_benchmark,
                       make_discretization)
from .solver import (SolverError, optimal_test_function_1d, optimal_test_relative_error,
                     read_condensed, write_condensed, online_qoi)
from .training import (SWEEP_COLUMNS, TrainingError, OptimalTestDiscretization,
                       train_with_restarts, write_sweep_csv)
from .weightnet import WeightNet

EXIT_OK, EXIT_CONFIG, EXIT_NUMERICAL = 0, 2, 3
MANIFEST = "manifest.json"
RUN_RECORD = "run.json"
ARTIFACTS = {"model": "model.json", "condensed": "condensed.bin",
             "log": "training_log.csv", "sweep": "sweep.csv"}


class ConfigError(ValueError):
    pass


def thread_count():
    raw = os.environ.get("GOALFEM_THREADS", "")
    try:
        return max(1, int(raw))
    except ValueError:
        return min(8, os.cpu_count() or 1)


def parallel_map(fn, items):
    """Ordered map over ``items`` using up to GOALFEM_THREADS workers."""
    items = list(items)
    workers = thread_count()
    if workers == 1 or len(items) < 2:
        return [fn(x) for x in items]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, items))


def _now():
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# -- benchmark resolution -----------------------------------------------------------


def resolve_benchmark(target, benchmark_id=None):
    """``target`` is a benchmark id or a path to a JSON config file.
    Returns (benchmark, config path or None)."""
    path = Path(target)
    try:
        if path.suffix == ".json" or path.is_file():
            if not path.is_file():
                raise ConfigError(f"config file {target} not found")
            catalog = benchmark_catalog(path)
            if not catalog:
                raise ConfigError(f"{target} defines no benchmarks")
            if benchmark_id is None:
                return catalog[0], str(path.resolve())
            for b in catalog:
                if b.id == benchmark_id:
                    return b, str(path.resolve())
            raise ConfigError(f"{target} has no benchmark {benchmark_id!r}")
        return get_benchmark(target), None
    except KeyError as exc:
        raise ConfigError(exc.args[0]) from exc
    except (json.JSONDecodeError, TypeError) as exc:
        raise ConfigError(f"invalid config {target}: {exc}") from exc


def resolved_config(benchmark, variant, config):
    return {"benchmark": benchmark.id, "definition": benchmark.raw,
            "variant": benchmark.variant(variant), "training": asdict(config)}


def config_hash(resolved):
    text = json.dumps(resolved, sort_keys=True, separators=(",", ":"))
    return hashlib.sha256(text.encode()).hexdigest()


# -- evaluation helpers -------------------------------------------------------------


def sweep_table(evaluate, grid, oracle):
    """Rows in SWEEP_COLUMNS order; ``evaluate(lam)`` returns the QoI vector."""
    values = parallel_map(evaluate, grid)
    rows = []
    for lam, q in zip(grid, values):
        exact = np.atleast_1d(oracle(lam))
        for k, (qd, qe) in enumerate(zip(np.atleast_1d(q), exact)):
            err = abs(qd - qe)
            rel = err / abs(qe) if qe != 0 else float("nan")
            rows.append((float(lam), k, float(qd), float(qe), float(err), float(rel)))
    return rows


def online_evaluator(benchmark, variant, condensed_path):
    """QoI map read from a condensed file. Only the test-space load vector is
    assembled per parameter; A and B are never rebuilt."""
    spec = benchmark.variant(variant)
    test = build_variant_space(benchmark, spec["test"])
    problem = benchmark.problem
    op = read_condensed(condensed_path, lambda lam: assemble_load(test, problem, lam),
                        problem.lambda_domain)
    return lambda lam: online_qoi(op, float(lam))


def model_evaluator(benchmark, variant, model_path):
    net = WeightNet.load(model_path)
    disc = make_discretization(benchmark, variant, net)
    a, b = benchmark.problem.lambda_domain

    def evaluate(lam):
        if not a <= lam <= b:
            raise ValueError(f"lambda={lam} outside [{a}, {b}]")
        return disc.qois(net.theta, [float(lam)])[0]

    return evaluate


def parse_sweep(text):
    try:
        a, b, steps = text.split(":")
        a, b, steps = float(a), float(b), int(steps)
    except ValueError as exc:
        raise ConfigError(f"--sweep expects a:b:steps, got {text!r}") from exc
    if steps < 1:
        raise ConfigError("--sweep needs at least one step")
    return np.linspace(a, b, steps)


# -- train --------------------------------------------------------------------------


def run_training(benchmark, variant, out, seed=42, tol=None, max_iters=None, optimizer=None,
                 restarts=0, config_path=None, verbose=False):
    """Train one benchmark variant and write its artifacts; returns the manifest."""
    started = _now()
    vname = benchmark.variant(variant)["name"]
    config = benchmark.training_config(vname, seed=seed, tol=tol, max_iters=max_iters,
                                       optimizer=optimizer)
    resolved = resolved_config(benchmark, vname, config)
    disc = make_discretization(benchmark, vname)
    ts = benchmark.training_set()

    def log(it, J, gnorm):
        if verbose and it % 100 == 0:
            print(f"iter {it:6d}  loss {J:.6e}  |grad| {gnorm:.3e}", file=sys.stderr)

    run, seeds = train_with_restarts(config, ts, disc, max_restarts=restarts, callback=log)
    net = disc.net.with_theta(run.theta)

    out = Path(out)
    out.mkdir(parents=True, exist_ok=True)
    net.save(out / ARTIFACTS["model"])
    run.write_log(out / ARTIFACTS["log"])
    run.save(out / RUN_RECORD)
    artifacts = dict(ARTIFACTS)
    if isinstance(disc, OptimalTestDiscretization):
        # no discrete mixed system exists; eval falls back to the model file
        artifacts["condensed"] = None
        evaluate = lambda lam: disc.qois(run.theta, [lam])[0]
    else:
        write_condensed(disc.condensed(run.theta), out / ARTIFACTS["condensed"])
        evaluate = online_evaluator(benchmark, vname, out / ARTIFACTS["condensed"])
    rows = sweep_table(evaluate, benchmark.sweep_grid(), benchmark.exact_oracle())
    write_sweep_csv(rows, out / ARTIFACTS["sweep"])

    manifest = {
        "benchmark": benchmark.id,
        "variant": vname,
        "config_path": config_path,
        "config_hash": config_hash(resolved),
        "seed": run.config.seed,
        "seeds_tried": seeds,
        "optimizer": config.optimizer,
        "tol": config.tol,
        "final_loss": run.final_loss,
        "iterations": run.iterations,
        "stop_reason": run.stop_reason,
        "max_abs_error": max(r[4] for r in rows),
        "artifacts": artifacts,
        "run_record": RUN_RECORD,
        "started": started,
        "finished": _now(),
    }
    (out / MANIFEST).write_text(json.dumps(manifest, indent=2) + "\n")
    return manifest


def cmd_train(args):
    benchmark, config_path = resolve_benchmark(args.target, args.benchmark)
    out = args.out or f"runs/{benchmark.id}-{benchmark.variant(args.variant)['name']}"
    manifest = run_training(benchmark, args.variant, out, args.seed, args.tol, args.max_iters,
                            args.optimizer, args.restarts, config_path, args.verbose)
    print(json.dumps({k: manifest[k] for k in
                      ("benchmark", "variant", "seed", "final_loss", "iterations",
                       "stop_reason", "max_abs_error")}))
    print(f"artifacts written to {out}")
    return EXIT_OK


# -- eval ---------------------------------------------------------------------------


def load_artifact(path, benchmark_id=None, variant=None, config=None):
    """Returns (benchmark, variant, evaluate) for a manifest, run directory,
    condensed file or model file."""
    path = Path(path)
    if path.is_dir():
        path = path / MANIFEST
    if not path.is_file():
        raise ConfigError(f"artifact {path} not found")
    if path.suffix == ".json":
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path} is not valid JSON: {exc}") from exc
        if "artifacts" in data:
            target = data.get("config_path") or data["benchmark"]
            benchmark, _ = resolve_benchmark(target, data["benchmark"])
            arts = data["artifacts"]
            if arts.get("condensed"):
                return benchmark, data["variant"], online_evaluator(
                    benchmark, data["variant"], path.parent / arts["condensed"])
            return benchmark, data["variant"], model_evaluator(
                benchmark, data["variant"], path.parent / arts["model"])
        if "theta" in data:
            benchmark = _need_benchmark(benchmark_id, config)
            return benchmark, variant, model_evaluator(benchmark, variant, path)
        raise ConfigError(f"{path} is neither a manifest nor a model file")
    benchmark = _need_benchmark(benchmark_id, config)
    return benchmark, variant, online_evaluator(benchmark, variant, path)


def _need_benchmark(benchmark_id, config):
    if benchmark_id is None:
        raise ConfigError("--benchmark is required for bare condensed or model files")
    return resolve_benchmark(config or benchmark_id, benchmark_id if config else None)[0]


def cmd_eval(args):
    if args.sweep is None and not args.lam:
        raise ConfigError("give --lambda or --sweep")
    benchmark, variant, evaluate = load_artifact(args.artifact, args.benchmark, args.variant,
                                                 args.config)
    if args.sweep is not None:
        rows = sweep_table(evaluate, parse_sweep(args.sweep), benchmark.exact_oracle())
        if args.out:
            write_sweep_csv(rows, args.out)
            print(f"{len(rows)} rows written to {args.out}")
        else:
            print(",".join(SWEEP_COLUMNS))
            for r in rows:
                print(",".join(f"{v:.17g}" if isinstance(v, float) else str(v) for v in r))
        return EXIT_OK
    for lam, q in zip(args.lam, parallel_map(evaluate, args.lam)):
        for k, v in enumerate(np.atleast_1d(q)):
            print(f"lambda={lam:.17g} qoi[{k}]={v:.17g}")
    return EXIT_OK


# -- reproduce ----------------------------------------------------------------------


def _write_csv(path, header, columns):
    data = np.column_stack([np.asarray(c, float) for c in columns])
    with open(path, "w", newline="") as f:
        f.write(",".join(header) + "\n")
        for row in data:
            f.write(",".join(f"{v:.17g}" for v in row) + "\n")
    return path


def theta1_scan(lam, x0=0.1, theta2=-9.0, step=0.1, stop=100.0):
    """Signed relative QoI error of the exact optimal test function for the
    one-neuron affine-sigmoid weight, as a function of theta_1."""
    t1 = np.round(np.arange(int(round(stop / step)) + 1) * step, 12)
    err = [optimal_test_relative_error(
        optimal_test_function_1d(WeightNet(1, 1, "affine_sigmoid", [t, theta2])), lam, x0,
        signed=True) for t in t1]
    return t1, np.array(err)


class Reproducer:
    """Trains (deterministically, default seed) whatever a figure needs."""

    def __init__(self, out, seed=42, restarts=5):
        self.out = Path(out)
        self.seed = seed
        self.restarts = restarts
        self._runs = {}

    def trained(self, bid, variant):
        key = (bid, variant)
        if key not in self._runs:
            b = get_benchmark(bid)
            config = b.training_config(variant, seed=self.seed)
            disc = make_discretization(b, variant)
            run, _ = train_with_restarts(config, b.training_set(), disc,
                                         max_restarts=self.restarts)
            self._runs[key] = (b, disc, run.theta)
        return self._runs[key]

    def path(self, name):
        self.out.mkdir(parents=True, exist_ok=True)
        return self.out / name

    def scan(self, fig, lam):
        t1, err = theta1_scan(lam)
        return [_write_csv(self.path(f"{fig}.csv"), ("theta1", "rel_error"), (t1, np.abs(err)))]

    def error_curve(self, fig, bid, variant):
        b, disc, theta = self.trained(bid, variant)
        rows = sweep_table(lambda l: disc.qois(theta, [l])[0], b.sweep_grid(), b.exact_oracle())
        path = self.path(f"{fig}.csv")
        write_sweep_csv(rows, path)
        return [path]

    def solutions(self, fig, bid, variants, lam):
        """Exact and discrete solution profiles at one parameter value."""
        x = np.linspace(0.0, 1.0, 201)
        cols, header = [x], ["x", "exact"]
        b = get_benchmark(bid)
        cols.append(b.problem.exact_solution(lam, x))
        for v in variants:
            _, disc, theta = self.trained(bid, v)
            header.append(v)
            if isinstance(disc, OptimalTestDiscretization):
                phi = optimal_test_function_1d(disc.net.with_theta(theta))
                cols.append(x * phi(lam) / phi(1.0))
            else:
                U, _ = disc.solve(theta, [lam])
                cols.append(disc.trial_space.evaluate(U[:, 0], x))
        return [_write_csv(self.path(f"{fig}.csv"), header, cols)]

    def diffusion_details(self, fig):
        """Trained weights, (projected) optimal test functions and relative
        QoI errors for the three 1D diffusion approaches."""
        variants = ("optimal", "vh4", "vh16")
        x = np.linspace(0.0, 1.0, 201)
        weights, tests, errs = [x], [x], []
        b = get_benchmark("diffusion1d")
        grid = b.sweep_grid()[1:]  # the relative error is undefined at lambda = 0
        exact = np.array([b.exact_oracle()(l)[0] for l in grid])
        for v in variants:
            _, disc, theta = self.trained("diffusion1d", v)
            net = disc.net.with_theta(theta)
            weights.append(net.weight(x))
            if isinstance(disc, OptimalTestDiscretization):
                phi = optimal_test_function_1d(net)
                tests.append(phi(x) / phi(1.0))
            else:
                T = np.linalg.solve(disc.gram_matrix(theta), disc.B)[:, 0]
                t = disc.test_space.evaluate(T, x)
                tests.append(t / t[-1])
            errs.append(np.abs(disc.qois(theta, grid)[:, 0] - exact) / np.abs(exact))
        return [
            _write_csv(self.path(f"{fig}_weights.csv"), ("x",) + variants, weights),
            _write_csv(self.path(f"{fig}_test_functions.csv"), ("x",) + variants, tests),
            _write_csv(self.path(f"{fig}_rel_errors.csv"), ("lambda",) + variants,
                       [grid] + errs),
        ]


FIGURES = {
    "fig1a": ("theta_1 scan of the relative QoI error, lambda = 0.15",
              lambda r: r.scan("fig1a", 0.15)),
    "fig1b": ("theta_1 scan of the relative QoI error, lambda = 0.05",
              lambda r: r.scan("fig1b", 0.05)),
    "fig3": ("1D diffusion solutions at lambda = 0.35 and 0.75",
             lambda r: r.solutions("fig3_lambda0.35", "diffusion1d",
                                   ("optimal", "vh4", "vh16"), 0.35)
             + r.solutions("fig3_lambda0.75", "diffusion1d",
                           ("optimal", "vh4", "vh16"), 0.75)),
    "fig4": ("1D diffusion trained weights, test functions and relative errors",
             lambda r: r.diffusion_details("fig4")),
    "fig7": ("two-QoI advection solutions at lambda = 0.2",
             lambda r: r.solutions("fig7", "advection1d_2qoi", ("3el", "4el", "5el"), 0.2)),
}
for _i, _v in zip("abc", ("1el", "2el", "3el")):
    FIGURES[f"fig5{_i}"] = (f"1D advection QoI error curve, {_v}",
                           lambda r, v=_v, i=_i: r.error_curve(f"fig5{i}", "advection1d", v))
for _i, _v in zip("abc", ("3el", "4el", "5el")):
    FIGURES[f"fig8{_i}"] = (f"two-QoI advection error curves, {_v}",
                           lambda r, v=_v, i=_i: r.error_curve(f"fig8{i}", "advection1d_2qoi", v))
for _i, _v in zip("abc", ("1dof", "5dof", "8dof")):
    FIGURES[f"fig11{_i}"] = (f"2D diffusion QoI error curve, {_v}",
                            lambda r, v=_v, i=_i: r.error_curve(f"fig11{i}", "diffusion2d", v))


def cmd_reproduce(args):
    if args.figure == "list":
        for fid, (desc, _) in FIGURES.items():
            print(f"{fid:7s} {desc}")
        return EXIT_OK
    if args.figure not in FIGURES:
        raise ConfigError(f"unknown figure {args.figure!r}; choose from {sorted(FIGURES)}")
    reproducer = Reproducer(args.out, args.seed, args.restarts)
    for path in FIGURES[args.figure][1](reproducer):
        print(path)
    return EXIT_OK


# -- entry point --------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="goalfem", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    t = sub.add_parser("train", help="train a benchmark and write its artifacts")
    t.add_argument("target", help="benchmark id or path to a JSON benchmark config")
    t.add_argument("--benchmark", help="benchmark id inside a multi-benchmark config file")
    t.add_argument("--variant", help="trial/test variant (default: first in the config)")
    t.add_argument("--seed", type=int, default=42)
    t.add_argument("--tol", type=float)
    t.add_argument("--max-iters", type=int)
    t.add_argument("--optimizer", choices=("adam", "gd", "lbfgs"))
    t.add_argument("--restarts", type=int, default=0,
                   help="retries with fresh seeds when a run ends above tol")
    t.add_argument("--out", help="output directory (default runs/<benchmark>-<variant>)")
    t.add_argument("-v", "--verbose", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate QoIs from stored artifacts")
    e.add_argument("artifact", help="manifest, run directory, condensed .bin or model .json")
    e.add_argument("--lambda", dest="lam", type=float, action="append", default=[])
    e.add_argument("--sweep", help="a:b:steps parameter grid")
    e.add_argument("--out", help="CSV file for --sweep output")
    e.add_argument("--benchmark", help="benchmark id for bare condensed/model files")
    e.add_argument("--variant")
    e.add_argument("--config", help="JSON config that defines --benchmark")
    e.set_defaults(func=cmd_eval)

    r = sub.add_parser("reproduce", help="write the CSV tables behind a figure")
    r.add_argument("figure", help="figure id, or 'list'")
    r.add_argument("--out", default="figures")
    r.add_argument("--seed", type=int, default=42)
    r.add_argument("--restarts", type=int, default=5)
    r.set_defaults(func=cmd_reproduce)
    return p


def _fail(code, kind, message):
    print(json.dumps({"error": kind, "message": message}), file=sys.stderr)
    return code


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (SolverError, TrainingError, FloatingPointError, np.linalg.LinAlgError) as exc:
        return _fail(EXIT_NUMERICAL, type(exc).__name__, str(exc))
    except (ConfigError, KeyError, ValueError, FileNotFoundError, IndexError) as exc:
        msg = exc.args[0] if isinstance(exc, KeyError) and exc.args else str(exc)
        return _fail(EXIT_CONFIG, type(exc).__name__, msg)


if __name__ == "__main__":
    sys.exit(main())
