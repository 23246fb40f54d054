"""Test signals, reference solutions and (solver x signal x budget) grids.

Signals use numpy's ``default_rng`` (the PCG64 bit generator) seeded with
the ``SignalSpec`` seed, so a ``SignalSpec`` determines its signal bit for
bit on one platform. Records are exported as CSV with one row per trace sample and a
summary table with one row per grid cell.
"""
from __future__ import annotations

import csv
import hashlib
import json
import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from .asymptotic import admm_penalty, admm_solve, dykstra_solve, hildreth_solve, lsps_solve, uzawa_solve, warm_up
from .errors import ConeRegressionError, ReferenceDisagreementError
from .finite import block_active_set_solve, critical_index_solve, meyer_solve, mpdb_solve
from .geometry import ConeSystem, Signal, build_cone_system
from .trace import IterControl, SolverResult, SolverTrace
from .warmstart import MAX_ORACLE_CONSTRAINTS, brute_force_project

__all__ = [
    "FAMILIES",
    "SignalSpec",
    "generate_signal",
    "reference_solution",
    "SolverConfig",
    "SOLVERS",
    "solver_config",
    "Sample",
    "ExperimentRecord",
    "run_grid",
    "export_records",
    "import_records",
    "export_summary",
    "RECORD_HEADER",
    "SUMMARY_HEADER",
    "DEFAULT_BUDGETS",
    "DEFAULT_SIZES",
    "DEFAULT_SIGMAS",
]

FAMILIES = ("S1", "S2", "S3")
DEFAULT_BUDGETS = (0.1, 1.0, 10.0)
DEFAULT_SIZES = (50, 200, 500)
DEFAULT_SIGMAS = (0.01, 0.1, 0.5)
REFERENCE_AGREEMENT = 1e-7
REFERENCE_KKT = 1e-8

RECORD_HEADER = ("solver", "family", "n", "sigma", "seed", "budget_s", "cpu_s",
                 "l2_distance", "kkt_primal", "kkt_dual", "kkt_comp", "status")
SUMMARY_HEADER = ("solver", "family", "n", "sigma", "seed", "budget_s", "status", "samples",
                  "terminal_cpu_s", "terminal_l2_distance", "config_hash", "reference_id", "error")


# ---------------------------------------------------------------------------
# Signals
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SignalSpec:
    """One test signal: ``family`` in ``S1 | S2 | S3``, size, noise level and seed."""

    family: str
    n: int
    sigma: float
    seed: int = 0

    def __post_init__(self):
        fam = str(self.family).upper()
        if fam not in FAMILIES:
            raise ValueError(f"family must be one of {FAMILIES}, got {self.family!r}")
        object.__setattr__(self, "family", fam)
        if int(self.n) != self.n or self.n < 3:
            raise ValueError(f"n must be an integer >= 3, got {self.n}")
        if not (self.sigma >= 0 and math.isfinite(self.sigma)):
            raise ValueError(f"sigma must be finite and >= 0, got {self.sigma}")
        object.__setattr__(self, "n", int(self.n))
        object.__setattr__(self, "sigma", float(self.sigma))
        object.__setattr__(self, "seed", int(self.seed))

    @property
    def key(self) -> tuple:
        return (self.family, self.n, self.sigma, self.seed)

    @property
    def reference_id(self) -> str:
        return f"ref:{self.family}:{self.n}:{self.sigma!r}:{self.seed}"


def s1_clean(n: int) -> np.ndarray:
    """Noise-free S1 on ``z = 1..n``: a sine arc, a line, then a cubic."""
    z = np.arange(1, n + 1, dtype=float)
    beta = 0.1
    alpha = 2 * n * np.sin(8 / 5) - beta * n
    gam = -2.0 / n**2
    delta = alpha + beta * 2 * n / 3 - gam * 8 * n**3 / 27
    return np.where(z <= n / 3, 2 * n * np.sin(24 * z / (5 * n)),
                    np.where(z <= 2 * n / 3, alpha + beta * z, gam * z**3 + delta))


def generate_signal(spec: SignalSpec) -> Signal:
    """Build the signal of ``spec`` on ``z = 1..n`` with unit weights.

    S1 is :func:`s1_clean`; S2 draws i.i.d. standard normal values; S3 is
    ``sinc(6 z / n - 1)`` with the normalized ``sin(pi t) / (pi t)``. Gaussian
    noise of standard deviation ``sigma`` is added, drawn after the S2 base
    values from the same generator.
    """
    n = spec.n
    rng = np.random.default_rng(spec.seed)
    z = np.arange(1, n + 1, dtype=float)
    if spec.family == "S1":
        base = s1_clean(n)
    elif spec.family == "S2":
        base = rng.standard_normal(n)
    else:
        base = np.sinc(6 * z / n - 1)
    y = base + spec.sigma * rng.standard_normal(n)
    return Signal.from_values(y, z=z)


# ---------------------------------------------------------------------------
# References
# ---------------------------------------------------------------------------


def _mpdb_reference(signal: Signal, cone: ConeSystem) -> SolverResult:
    return mpdb_solve(signal, cone, IterControl(max_iterations=10**9), init="pav").result


def _block_reference(signal: Signal, cone: ConeSystem) -> SolverResult:
    return block_active_set_solve(signal, cone, IterControl(max_iterations=10**9)).result


def reference_solution(signal: Signal, cone: ConeSystem | None = None,
                       solvers: Sequence[Callable] = (_mpdb_reference, _block_reference)) -> SolverResult:
    """Ground-truth projection used to measure distances.

    For ``m <= 20`` the exhaustive oracle is used. Otherwise two independent
    finite solvers (MPDB with the warm start, and the block active-set
    solver by default) must agree to ``1e-7`` in the max norm and the first
    must pass the KKT certificate at ``1e-8`` relative to ``max(1, ||y||_inf)``.

    Parameters
    ----------
    signal : Signal
    cone : ConeSystem, optional
    solvers : pair of callables ``(signal, cone) -> SolverResult``
        Replaceable for fault-injection tests.

    Raises
    ------
    ReferenceDisagreementError
        If the two solvers disagree or the certificate fails.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    if cone.m <= MAX_ORACLE_CONSTRAINTS:
        res = brute_force_project(signal, cone)
        res.info["reference"] = "brute_force"
        return res
    first, second = solvers
    a, b = first(signal, cone), second(signal, cone)
    gap = float(np.abs(a.x - b.x).max())
    if not gap <= REFERENCE_AGREEMENT:
        raise ReferenceDisagreementError(
            f"reference solvers {a.solver!r} and {b.solver!r} differ by {gap:.3e} (limit {REFERENCE_AGREEMENT:g})")
    # scale-relative: at n = 1000 the absolute residuals of an exact pair sit near 1e-8
    if not a.certificate.passes(REFERENCE_KKT, relative=True):
        raise ReferenceDisagreementError(
            f"reference from {a.solver!r} fails the KKT certificate (worst residual {a.certificate.worst:.3e})")
    a.info["reference"] = f"{a.solver}+{b.solver}"
    a.info["agreement"] = gap
    return a


# ---------------------------------------------------------------------------
# Solver registry
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SolverConfig:
    """A named solver with fixed options."""

    name: str
    family: str  # "asymptotic" or "finite"
    base: str
    options: tuple = ()

    @property
    def config_hash(self) -> str:
        blob = json.dumps({"base": self.base, "options": list(self.options)}, sort_keys=True)
        return hashlib.sha1(blob.encode()).hexdigest()[:10]

    def run(self, signal: Signal, cone: ConeSystem, ctl: IterControl) -> SolverTrace:
        opts = dict(self.options)
        fn = _BASE[self.base]
        if self.base == "admm" and opts.get("gamma") == "spectral":
            opts["gamma"] = admm_penalty(cone)
        return fn(signal, cone, ctl, **opts)


_BASE: dict[str, Callable] = {
    "hildreth": hildreth_solve,
    "dykstra": dykstra_solve,
    "lsps": lsps_solve,
    "uzawa": uzawa_solve,
    "admm": admm_solve,
    "mpdb": mpdb_solve,
    "meyer": meyer_solve,
    "critical-index": critical_index_solve,
    "block": block_active_set_solve,
}

SOLVERS: dict[str, SolverConfig] = {
    c.name: c
    for c in (
        SolverConfig("hildreth", "asymptotic", "hildreth"),
        SolverConfig("dykstra", "asymptotic", "dykstra"),
        SolverConfig("lsps", "asymptotic", "lsps"),
        SolverConfig("uzawa", "asymptotic", "uzawa"),
        SolverConfig("admm", "asymptotic", "admm", (("gamma", "spectral"),)),
        SolverConfig("mpdb", "finite", "mpdb"),
        SolverConfig("mpdb-pav", "finite", "mpdb", (("init", "pav"),)),
        SolverConfig("meyer", "finite", "meyer", (("init", "empty"),)),
        SolverConfig("meyer-full", "finite", "meyer", (("init", "full"),)),
        SolverConfig("meyer-pav", "finite", "meyer", (("init", "pav"),)),
        SolverConfig("critical-index", "finite", "critical-index"),
        SolverConfig("block", "finite", "block"),
        SolverConfig("block-pav", "finite", "block", (("init", "pav"),)),
    )
}


def solver_config(name: str) -> SolverConfig:
    try:
        return SOLVERS[name]
    except KeyError:
        raise ValueError(f"unknown solver {name!r}; valid: {', '.join(SOLVERS)}") from None


# ---------------------------------------------------------------------------
# Records
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class Sample:
    cpu_s: float
    l2_distance: float
    kkt_primal: float
    kkt_dual: float
    kkt_comp: float


@dataclass
class ExperimentRecord:
    """One grid cell: a solver run on one spec under one CPU budget.

    ``status`` is ``converged``, ``budget`` (stopped by the budget or the
    iteration cap) or ``error`` (``error`` then holds the message).
    """

    spec: SignalSpec
    solver: str
    budget_s: float
    status: str
    samples: list = field(default_factory=list)
    config_hash: str = ""
    reference_id: str = ""
    error: str = field(default="", compare=False)

    @property
    def key(self) -> tuple:
        return (self.solver, *self.spec.key, self.budget_s)

    @property
    def terminal(self) -> Sample | None:
        return self.samples[-1] if self.samples else None


def _samples_from_trace(trace: SolverTrace) -> list:
    return [Sample(float(s.cpu_time), float(s.distance), float(s.primal), float(s.dual),
                   float(s.complementarity)) for s in trace.samples]


@dataclass(frozen=True)
class _Cell:
    spec: SignalSpec
    solver: str
    budget_s: float
    reference: np.ndarray | None
    reference_error: str
    trace_stride: int
    max_iterations: int
    stop_tolerance: float


def _run_cell(cell: _Cell) -> ExperimentRecord:
    cfg = SOLVERS.get(cell.solver)
    base = dict(spec=cell.spec, solver=cell.solver, budget_s=cell.budget_s,
                config_hash=cfg.config_hash if cfg else "", reference_id=cell.spec.reference_id)
    if cfg is None:
        return ExperimentRecord(status="error", error=f"unknown solver {cell.solver!r}", **base)
    if cell.reference is None:
        return ExperimentRecord(status="error", error=f"no reference: {cell.reference_error}", **base)
    try:
        warm_up()
        signal = generate_signal(cell.spec)
        cone = build_cone_system(signal)
        stride = cell.trace_stride if cfg.family == "asymptotic" else 1
        ctl = IterControl(max_iterations=cell.max_iterations, time_budget=cell.budget_s,
                          stop_tolerance=cell.stop_tolerance, trace_stride=stride, reference=cell.reference)
        trace = cfg.run(signal, cone, ctl)
    except (ConeRegressionError, ValueError, ArithmeticError, np.linalg.LinAlgError) as exc:
        return ExperimentRecord(status="error", error=f"{type(exc).__name__}: {exc}", **base)
    status = "converged" if trace.result.converged else "budget"
    return ExperimentRecord(status=status, samples=_samples_from_trace(trace), **base)


def run_grid(specs: Iterable[SignalSpec], solvers: Iterable[str], budgets: Iterable[float], *,
             jobs: int = 1, trace_stride: int = 100, max_iterations: int = 10**9,
             stop_tolerance: float = 1e-8, references: dict | None = None) -> list:
    """Run every (solver, spec, budget) cell and return the records in grid order.

    References are computed once per spec in the calling process. Cells run
    in up to ``jobs`` worker processes (capped at the CPU count so each cell
    has a core for CPU-time measurement); a failing cell becomes an
    ``error`` record and the grid continues.

    Parameters
    ----------
    specs, solvers, budgets : iterables
        Grid axes; budgets are CPU seconds per cell.
    jobs : int
        Maximum concurrent cells.
    trace_stride : int
        Iterations between samples for the asymptotic solvers (finite
        solvers record every step).
    max_iterations : int
        Iteration cap per cell; with a cap that binds before the budget the
        sampled distances do not depend on timing.
    stop_tolerance : float
        A cell converges once its distance to the reference falls below it.
    references : dict, optional
        Precomputed reference ``x`` per ``SignalSpec``.
    """
    specs, solvers, budgets = list(specs), list(solvers), [float(b) for b in budgets]
    for b in budgets:
        if not b > 0:
            raise ValueError(f"budgets must be positive, got {b}")
    refs: dict = dict(references or {})
    ref_errors: dict = {}
    for spec in specs:
        if spec in refs:
            continue
        try:
            refs[spec] = reference_solution(generate_signal(spec)).x
        except ConeRegressionError as exc:
            ref_errors[spec] = f"{type(exc).__name__}: {exc}"
    cells = [_Cell(spec, solver, budget, refs.get(spec), ref_errors.get(spec, ""), trace_stride,
                   max_iterations, stop_tolerance)
             for spec in specs for solver in solvers for budget in budgets]
    workers = max(1, min(int(jobs), os.cpu_count() or 1, len(cells) or 1))
    if workers == 1:
        return [_run_cell(c) for c in cells]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        # map preserves submission order, so the result order is the grid order
        return list(pool.map(_run_cell, cells))


# ---------------------------------------------------------------------------
# CSV
# ---------------------------------------------------------------------------


def _fmt(v: float) -> str:
    return repr(float(v))


def _open_for_write(path):
    path = Path(path)
    try:
        return path.open("w", newline="")
    except OSError as exc:
        raise OSError(f"cannot write {path}: {exc.strerror or exc}") from exc


def export_records(records: Sequence[ExperimentRecord], path) -> Path:
    """Write one CSV row per sample (``RECORD_HEADER`` columns).

    Floats are written with ``repr`` so they parse back exactly. A record
    without samples (an ``error`` cell) is written as one row with empty
    numeric sample fields.
    """
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(RECORD_HEADER)
        for r in records:
            head = [r.solver, r.spec.family, r.spec.n, _fmt(r.spec.sigma), r.spec.seed, _fmt(r.budget_s)]
            if not r.samples:
                w.writerow(head + ["", "", "", "", "", r.status])
            for s in r.samples:
                w.writerow(head + [_fmt(s.cpu_s), _fmt(s.l2_distance), _fmt(s.kkt_primal),
                                   _fmt(s.kkt_dual), _fmt(s.kkt_comp), r.status])
    return path


def import_records(path) -> list:
    """Parse a file written by :func:`export_records` back into records.

    Consecutive rows with the same cell key form one record; the config
    hash and reference id are restored from the solver registry and spec.
    """
    path = Path(path)
    try:
        fh = path.open(newline="")
    except OSError as exc:
        raise OSError(f"cannot read {path}: {exc.strerror or exc}") from exc
    records: list = []
    with fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or tuple(header) != RECORD_HEADER:
            raise ValueError(f"{path}: header does not match {','.join(RECORD_HEADER)}")
        for lineno, row in enumerate(reader, start=2):
            if len(row) != len(RECORD_HEADER):
                raise ValueError(f"{path}:{lineno}: expected {len(RECORD_HEADER)} fields, got {len(row)}")
            solver, fam, n, sigma, seed, budget, cpu, dist, kp, kd, kc, status = row
            try:
                spec = SignalSpec(fam, int(n), float(sigma), int(seed))
                budget_s = float(budget)
                sample = Sample(float(cpu), float(dist), float(kp), float(kd), float(kc)) if cpu != "" else None
            except ValueError as exc:
                raise ValueError(f"{path}:{lineno}: {exc}") from None
            key = (solver, *spec.key, budget_s)
            if not records or records[-1].key != key:
                cfg = SOLVERS.get(solver)
                records.append(ExperimentRecord(spec=spec, solver=solver, budget_s=budget_s, status=status,
                                                config_hash=cfg.config_hash if cfg else "",
                                                reference_id=spec.reference_id))
            if sample is not None:
                records[-1].samples.append(sample)
    return records


def export_summary(records: Sequence[ExperimentRecord], path) -> Path:
    """Write one row per cell with its status and terminal sample."""
    path = Path(path)
    with _open_for_write(path) as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SUMMARY_HEADER)
        for r in records:
            t = r.terminal
            w.writerow([r.solver, r.spec.family, r.spec.n, _fmt(r.spec.sigma), r.spec.seed, _fmt(r.budget_s),
                        r.status, len(r.samples), _fmt(t.cpu_s) if t else "", _fmt(t.l2_distance) if t else "",
                        r.config_hash, r.reference_id, r.error])
    return path
