"""Command-line front end: ``solve``, ``benchmark`` and ``validate``.

Exit codes: 0 ok, 1 usage or input error, 2 no convergence, 3 a grid cell
failed, 4 validation failed.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .benchmark import (
    DEFAULT_BUDGETS,
    DEFAULT_SIGMAS,
    DEFAULT_SIZES,
    FAMILIES,
    SOLVERS,
    SignalSpec,
    export_records,
    export_summary,
    run_grid,
)
from .errors import ConeRegressionError
from .geometry import KKT_TOL, Signal, build_cone_system
from .trace import IterControl
from .warmstart import brute_force_project

EXIT_OK, EXIT_USAGE, EXIT_NONCONVERGED, EXIT_CELL_FAILED, EXIT_VALIDATION = 0, 1, 2, 3, 4
INIT_SOLVERS = ("mpdb", "meyer", "block")
VALIDATE_TOL = 1e-6


class InputError(Exception):
    """Malformed user input; the message carries file and line context."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _solver_help() -> str:
    return "solver id, one of: " + ", ".join(SOLVERS)


def _csv_list(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected a comma-separated list, got {text!r}") from None
    return parse


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="coneregress", description="Concave (cone) regression solvers and benchmarks.",
                epilog=_solver_help().replace("solver id, one of", "solver ids") +
                "\nexit codes: 0 ok, 1 usage or input, 2 no convergence, 3 grid cell failed, 4 validation failed",
                formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("solve", help="fit one dataset")
    s.add_argument("--solver", required=True, help=_solver_help())
    s.add_argument("--input", required=True, help="CSV with header z,y[,w]")
    s.add_argument("--init", default=None,
                   help="start for mpdb, meyer and block: empty, full or pav (overrides the solver id's default)")
    s.add_argument("--tol", type=float, default=KKT_TOL, help="KKT stopping tolerance (default %(default)g)")
    s.add_argument("--max-iter", type=int, default=1_000_000, help="iteration cap (default %(default)d)")
    s.add_argument("--budget", type=float, default=None, help="CPU-time budget in seconds")
    s.add_argument("--gamma", type=float, default=None, help="ADMM index gamma (default: spectral rule)")
    s.add_argument("--format", choices=("csv", "json"), default="csv", help="output format")
    s.add_argument("--out", default=None, help="output file (default stdout)")

    b = sub.add_parser("benchmark", help="run a solver x signal x budget grid")
    b.add_argument("--families", type=_csv_list(str), default=list(FAMILIES), help="e.g. s1,s2,s3")
    b.add_argument("--sizes", type=_csv_list(int), default=list(DEFAULT_SIZES), help="e.g. 50,200,500")
    b.add_argument("--sigmas", type=_csv_list(float), default=list(DEFAULT_SIGMAS), help="e.g. 0.01,0.1,0.5")
    b.add_argument("--seeds", type=_csv_list(int), default=[0], help="e.g. 0,1,2")
    b.add_argument("--solvers", type=_csv_list(str), default=list(SOLVERS), help=_solver_help())
    b.add_argument("--budgets", type=_csv_list(float), default=list(DEFAULT_BUDGETS), help="CPU seconds per cell")
    b.add_argument("--jobs", type=int, default=1, help="concurrent cells, capped at the CPU count")
    b.add_argument("--trace-stride", type=int, default=100, help="iterations between asymptotic samples")
    b.add_argument("--max-iter", type=int, default=10**9, help="iteration cap per cell")
    b.add_argument("--tol", type=float, default=1e-8, help="distance-to-reference stop (default %(default)g)")
    b.add_argument("--out", required=True, help="output directory for records.csv and summary.csv")

    v = sub.add_parser("validate", help="compare solvers with the exhaustive oracle")
    v.add_argument("--trials", type=int, default=100, help="random signals (default %(default)d)")
    v.add_argument("--seed", type=int, default=0, help="base seed (default %(default)d)")
    v.add_argument("--solvers", type=_csv_list(str), default=list(SOLVERS), help=_solver_help())
    v.add_argument("--max-n", type=int, default=12, help="largest signal size, at most 22")
    v.add_argument("--out", default=None, help="optional CSV of per-trial deviations")
    v.add_argument("--inject-fault", default=None, metavar="SOLVER",
                   help="testing hook: perturb this solver's output to exercise the failure path")
    return p


# ---------------------------------------------------------------------------
# solve
# ---------------------------------------------------------------------------


def read_dataset(path) -> Signal:
    """Read a CSV with header ``z,y`` or ``z,y,w``.

    Raises
    ------
    InputError
        With ``path:line`` context for any malformed content.
    """
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise InputError(f"{path}: cannot read: {exc.strerror or exc}") from None
    rows = list(csv.reader(io.StringIO(text)))
    if not rows:
        raise InputError(f"{path}:1: empty file, expected header z,y[,w]")
    header = [h.strip().lower() for h in rows[0]]
    if header not in (["z", "y"], ["z", "y", "w"]):
        raise InputError(f"{path}:1: header must be z,y or z,y,w, got {','.join(rows[0])}")
    cols: list = [[] for _ in header]
    for lineno, row in enumerate(rows[1:], start=2):
        if not row or all(not c.strip() for c in row):
            continue
        if len(row) != len(header):
            raise InputError(f"{path}:{lineno}: expected {len(header)} fields, got {len(row)}")
        for k, cell in enumerate(row):
            try:
                val = float(cell)
            except ValueError:
                raise InputError(f"{path}:{lineno}: {header[k]}={cell!r} is not a number") from None
            if not math.isfinite(val):
                raise InputError(f"{path}:{lineno}: {header[k]}={cell!r} is not finite")
            cols[k].append(val)
    if len(cols[0]) < 3:
        raise InputError(f"{path}: need at least 3 data rows, got {len(cols[0])}")
    z = np.array(cols[0])
    bad = np.flatnonzero(np.diff(z) <= 0)
    if bad.size:
        raise InputError(f"{path}:{int(bad[0]) + 3}: z must be strictly increasing")
    w = np.array(cols[2]) if len(cols) == 3 else None
    if w is not None and np.any(w <= 0):
        raise InputError(f"{path}:{int(np.flatnonzero(w <= 0)[0]) + 2}: weights must be positive")
    return Signal.from_values(np.array(cols[1]), z=z, w=w)


def _solve_payload(signal: Signal, result, solver: str) -> dict:
    m = signal.n - 2
    saturated = set(result.active_set)
    points = []
    for i in range(signal.n):
        c = i - 1  # constraint centred on point i
        points.append({
            "i": i,
            "z": float(signal.z[i]),
            "y": float(signal.y[i]),
            "w": float(signal.w[i]),
            "x": float(result.x[i]),
            "lam": float(result.lam[c]) if 0 <= c < m else None,
            "saturated": (c in saturated) if 0 <= c < m else None,
        })
    cert = result.certificate
    return {
        "solver": solver,
        "converged": bool(result.converged),
        "iterations": int(result.iterations),
        "kkt_primal": cert.primal_residual,
        "kkt_dual": cert.dual_residual,
        "kkt_comp": cert.complementarity,
        "kkt_stationarity": cert.stationarity,
        "active_set": sorted(int(j) for j in saturated),
        "points": points,
    }


def _write_solve_csv(payload: dict, fh):
    for key in ("solver", "converged", "iterations", "kkt_primal", "kkt_dual", "kkt_comp", "kkt_stationarity"):
        val = payload[key]
        fh.write(f"# {key}={repr(val) if isinstance(val, float) else str(val).lower() if isinstance(val, bool) else val}\n")
    fh.write(f"# active_set={' '.join(map(str, payload['active_set']))}\n")
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(("i", "z", "y", "w", "x", "lam", "saturated"))
    for p in payload["points"]:
        w.writerow((p["i"], repr(p["z"]), repr(p["y"]), repr(p["w"]), repr(p["x"]),
                    "" if p["lam"] is None else repr(p["lam"]),
                    "" if p["saturated"] is None else str(p["saturated"]).lower()))


def _emit(text: str, out) -> None:
    if out is None:
        sys.stdout.write(text)
        return
    try:
        Path(out).write_text(text)
    except OSError as exc:
        raise InputError(f"{out}: cannot write: {exc.strerror or exc}") from None


def cmd_solve(args) -> int:
    if args.solver not in SOLVERS:
        print(f"error: unknown solver {args.solver!r}; valid: {', '.join(SOLVERS)}", file=sys.stderr)
        return EXIT_USAGE
    cfg = SOLVERS[args.solver]
    opts = dict(cfg.options)
    if args.init is not None:
        if cfg.base not in INIT_SOLVERS:
            print(f"error: --init applies only to {', '.join(INIT_SOLVERS)}", file=sys.stderr)
            return EXIT_USAGE
        if args.init not in ("empty", "full", "pav"):
            print(f"error: --init must be empty, full or pav, got {args.init!r}", file=sys.stderr)
            return EXIT_USAGE
        opts["init"] = args.init
    if args.gamma is not None:
        if cfg.base != "admm" or not args.gamma > 0:
            print("error: --gamma applies only to admm and must be positive", file=sys.stderr)
            return EXIT_USAGE
        opts["gamma"] = args.gamma
    try:
        signal = read_dataset(args.input)
        ctl = IterControl(max_iterations=args.max_iter, time_budget=args.budget, stop_tolerance=args.tol)
    except (InputError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    cone = build_cone_system(signal)
    run_cfg = type(cfg)(cfg.name, cfg.family, cfg.base, tuple(sorted(opts.items())))
    try:
        result = run_cfg.run(signal, cone, ctl).result
    except ConeRegressionError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_NONCONVERGED
    payload = _solve_payload(signal, result, args.solver)
    if args.format == "json":
        text = json.dumps(payload, indent=2) + "\n"
    else:
        buf = io.StringIO()
        _write_solve_csv(payload, buf)
        text = buf.getvalue()
    try:
        _emit(text, args.out)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    ok = result.converged and result.certificate.passes(args.tol)
    return EXIT_OK if ok else EXIT_NONCONVERGED


# ---------------------------------------------------------------------------
# benchmark
# ---------------------------------------------------------------------------


def cmd_benchmark(args) -> int:
    unknown = [s for s in args.solvers if s not in SOLVERS]
    if unknown:
        print(f"error: unknown solver(s) {', '.join(unknown)}; valid: {', '.join(SOLVERS)}", file=sys.stderr)
        return EXIT_USAGE
    try:
        specs = [SignalSpec(f, n, s, seed) for f in args.families for n in args.sizes
                 for s in args.sigmas for seed in args.seeds]
        if not all(b > 0 for b in args.budgets):
            raise ValueError("budgets must be positive")
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
        probe = out / ".write-test"
        probe.write_text("")
        probe.unlink()
    except OSError as exc:
        print(f"error: {out}: not writable: {exc.strerror or exc}", file=sys.stderr)
        return EXIT_USAGE
    records = run_grid(specs, args.solvers, args.budgets, jobs=args.jobs, trace_stride=args.trace_stride,
                       max_iterations=args.max_iter, stop_tolerance=args.tol)
    try:
        export_records(records, out / "records.csv")
        export_summary(records, out / "summary.csv")
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    failed = [r for r in records if r.status == "error"]
    for r in failed:
        print(f"cell failed: {r.solver} {r.spec.family} n={r.spec.n} sigma={r.spec.sigma!r} "
              f"seed={r.spec.seed} budget={r.budget_s!r}: {r.error}", file=sys.stderr)
    print(f"{len(records)} cells, {len(failed)} failed; wrote {out / 'records.csv'} and {out / 'summary.csv'}")
    return EXIT_CELL_FAILED if failed else EXIT_OK


# ---------------------------------------------------------------------------
# validate
# ---------------------------------------------------------------------------


def validation_signal(seed: int, trial: int, max_n: int = 12) -> Signal:
    """Random signal for one validation trial, a pure function of ``(seed, trial)``.

    Sizes are drawn from ``[4, max_n]``; odd trials use non-uniform
    abscissae and random weights.
    """
    rng = np.random.default_rng([seed, trial])
    n = int(rng.integers(4, max_n + 1))
    if trial % 2:
        z = np.cumsum(rng.uniform(0.2, 2.0, n))
        w = rng.uniform(0.5, 2.0, n)
    else:
        z = np.arange(1.0, n + 1)
        w = None
    y = rng.standard_normal(n) * rng.uniform(0.1, 10.0)
    return Signal.from_values(y, z=z, w=w)


def _validation_ctl(cfg) -> IterControl:
    if cfg.family == "asymptotic":
        return IterControl(max_iterations=2_000_000, stop_tolerance=1e-11, trace_stride=500)
    return IterControl(max_iterations=100_000)


def run_validation(trials: int, seed: int, solvers: Sequence[str], max_n: int = 12,
                   inject_fault: str | None = None) -> list:
    """Return rows ``(trial, n, solver, deviation, error)`` for every trial and solver."""
    rows = []
    for t in range(trials):
        signal = validation_signal(seed, t, max_n)
        cone = build_cone_system(signal)
        oracle = brute_force_project(signal, cone).x
        for name in solvers:
            cfg = SOLVERS[name]
            try:
                x = cfg.run(signal, cone, _validation_ctl(cfg)).result.x
                if name == inject_fault:
                    x = x + 1e-3
                dev, err = float(np.abs(x - oracle).max()), ""
            except ConeRegressionError as exc:
                dev, err = math.inf, f"{type(exc).__name__}: {exc}"
            rows.append((t, signal.n, name, dev, err))
    return rows


def cmd_validate(args) -> int:
    unknown = [s for s in args.solvers + ([args.inject_fault] if args.inject_fault else []) if s not in SOLVERS]
    if unknown:
        print(f"error: unknown solver(s) {', '.join(unknown)}; valid: {', '.join(SOLVERS)}", file=sys.stderr)
        return EXIT_USAGE
    if args.trials < 1 or not 4 <= args.max_n <= 22:
        print("error: --trials must be >= 1 and --max-n in [4, 22]", file=sys.stderr)
        return EXIT_USAGE
    rows = run_validation(args.trials, args.seed, args.solvers, args.max_n, args.inject_fault)
    if args.out:
        try:
            with open(args.out, "w", newline="") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(("trial", "n", "solver", "deviation", "error"))
                for t, n, name, dev, err in rows:
                    w.writerow((t, n, name, repr(dev), err))
        except OSError as exc:
            print(f"error: {args.out}: cannot write: {exc.strerror or exc}", file=sys.stderr)
            return EXIT_USAGE
    failed = False
    print(f"validation: {args.trials} trials, seed {args.seed}, tolerance {VALIDATE_TOL:g}")
    for name in args.solvers:
        mine = [r for r in rows if r[2] == name]
        worst = max(mine, key=lambda r: r[3])
        status = "ok" if worst[3] <= VALIDATE_TOL else "FAIL"
        print(f"{name:<15} max_deviation={worst[3]:.3e} {status}")
        if status == "FAIL":
            failed = True
            bad = [r for r in mine if not r[3] <= VALIDATE_TOL]
            first = bad[0]
            print(f"  failing trial {first[0]} (seed {args.seed}, n={first[1]}): "
                  f"deviation {first[3]:.3e}{' ' + first[4] if first[4] else ''}; {len(bad)} failing trial(s)")
    return EXIT_VALIDATION if failed else EXIT_OK


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handler = {"solve": cmd_solve, "benchmark": cmd_benchmark, "validate": cmd_validate}[args.command]
    return handler(args)


if __name__ == "__main__":
    sys.exit(main())
