"""Acceptance criteria, one test each; every test prints a PASS/FAIL line.

Tolerances and sizes are pinned in the constants below.
"""
import csv
import io
import time

import numpy as np
import pytest

from coneregress import (
    IterControl,
    Signal,
    TrackedInverse,
    TrackedPinv,
    banded_spd_solve,
    block_active_set_solve,
    brute_force_project,
    build_cone_system,
    critical_index_solve,
    generate_signal,
    meyer_solve,
    mpdb_solve,
    pav_warm_start,
    reference_solution,
    run_grid,
    solve_block_system,
)
from coneregress.benchmark import SOLVERS, SignalSpec
from coneregress.asymptotic import warm_up
from coneregress.cli import main as cli_main, validation_signal

# 1 oracle equivalence
ORACLE_TRIALS = 500
ORACLE_N = (4, 12)
ORACLE_TOL = 1e-8
ORACLE_SECONDS = 120.0
# 2 certificates
CERT_TOL = 1e-8
CERT_MIN_RESULTS = 10_000
# 3 Moreau decomposition
MOREAU_IDENTITY_TOL = 1e-7
MOREAU_INNER_TOL = 1e-6
# 4 asymptotic convergence
ASYM_SPEC = SignalSpec("S1", 50, 0.01, 0)
ASYM_DISTANCE = 1e-5
ASYM_MAX_ITER = 10**6
ASYM_SECONDS = 60.0
ASYMPTOTIC = ("admm", "hildreth", "dykstra", "lsps", "uzawa")
# 5 qualitative ordering
SEEDS = range(5)
MIN_AGREEING = 4
NOISE_BUDGET = 1.0
WARM_BUDGET = 10.0
# 6 warm start
PAV_SIGNALS = 10_000
PAV_MAX_N = 1000
PAV_FEASIBILITY = 1e-8
PAV_SECONDS = 0.050
# 7 kernels
SM_CHAIN, SM_TOL = 150, 1e-6
PINV_CHAIN, PINV_TOL = 50, 1e-8
BANDED_N, BANDED_TOL = 1000, 1e-9
# 8 block structure
BLOCK_SPEC = dict(family="S1", n=200, sigma=0.1)
BLOCK_TOL = 1e-7

FINITE = {
    "mpdb": lambda s, c: mpdb_solve(s, c),
    "mpdb-pav": lambda s, c: mpdb_solve(s, c, init="pav"),
    "meyer-empty": lambda s, c: meyer_solve(s, c, init="empty"),
    "meyer-full": lambda s, c: meyer_solve(s, c, init="full"),
    "meyer-pav": lambda s, c: meyer_solve(s, c, init="pav"),
    "critical-index": lambda s, c: critical_index_solve(s, c),
    "block": lambda s, c: block_active_set_solve(s, c),
    "block-pav": lambda s, c: block_active_set_solve(s, c, init="pav"),
}


@pytest.fixture
def report(capsys):
    def emit(number, ok, detail):
        with capsys.disabled():
            print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {number}: {detail}")
    return emit


def random_signal(rng, n_range, trial):
    n = int(rng.integers(n_range[0], n_range[1] + 1))
    if trial % 2:
        z = np.cumsum(rng.uniform(0.2, 2.0, n))
        w = rng.uniform(0.5, 2.0, n)
    else:
        z, w = np.arange(1.0, n + 1), None
    return Signal.from_values(rng.standard_normal(n) * rng.uniform(0.1, 10.0), z=z, w=w)


_results: list = []


def _collect(signal, cone, result):
    if result.converged:
        _results.append((signal, cone, result))


def test_1_oracle_equivalence(report):
    rng = np.random.default_rng(1)
    worst = {name: 0.0 for name in FINITE}
    start = time.perf_counter()
    for t in range(ORACLE_TRIALS):
        s = random_signal(rng, ORACLE_N, t)
        cone = build_cone_system(s)
        oracle = brute_force_project(s, cone).x
        for name, solve in FINITE.items():
            r = solve(s, cone).result
            _collect(s, cone, r)
            dev = float(np.abs(r.x - oracle).max()) if r.converged else np.inf
            worst[name] = max(worst[name], dev)
    elapsed = time.perf_counter() - start
    ok = max(worst.values()) <= ORACLE_TOL and elapsed <= ORACLE_SECONDS
    report(1, ok, f"{ORACLE_TRIALS} trials, worst L-inf deviation {max(worst.values()):.2e} "
                  f"(limit {ORACLE_TOL:g}) in {elapsed:.1f} s (limit {ORACLE_SECONDS:g} s)")
    assert max(worst.values()) <= ORACLE_TOL, worst
    assert elapsed <= ORACLE_SECONDS


def test_2_certificates(report):
    rng = np.random.default_rng(2)
    ctl = IterControl(max_iterations=ASYM_MAX_ITER, stop_tolerance=CERT_TOL, trace_stride=200)
    unconverged = 0
    for k in range(200):
        s = random_signal(rng, (4, 20), k)
        cone = build_cone_system(s)
        for name in ASYMPTOTIC:
            r = SOLVERS[name].run(s, cone, ctl).result
            unconverged += not r.converged
            _collect(s, cone, r)
    t = 0
    while len(_results) < CERT_MIN_RESULTS:
        s = random_signal(rng, (4, 60), t)
        cone = build_cone_system(s)
        for solve in FINITE.values():
            r = solve(s, cone).result
            unconverged += not r.converged
            _collect(s, cone, r)
        t += 1
    failing = [(r.solver, r.certificate.worst) for _, _, r in _results if not r.certificate.passes(CERT_TOL)]
    solvers = sorted({r.solver for _, _, r in _results})
    ok = len(_results) >= CERT_MIN_RESULTS and not failing
    report(2, ok, f"{len(_results)} converged results from {len(solvers)} solvers, "
                  f"{len(failing)} fail the certificate at {CERT_TOL:g} "
                  f"({unconverged} runs stopped at the iteration cap and are excluded)")
    assert len(_results) >= CERT_MIN_RESULTS
    assert not failing, failing[:5]


def test_3_moreau(report):
    assert _results, "runs after criteria 1 and 2"
    worst_id, worst_inner = 0.0, 0.0
    for s, cone, r in _results:
        if not r.certificate.passes(CERT_TOL):
            continue
        polar = cone.winv * (np.asarray(cone.A).T @ r.lam)
        worst_id = max(worst_id, float(np.abs(s.y - r.x - polar).max()))
        worst_inner = max(worst_inner, abs(float(np.sum(s.w * r.x * (s.y - r.x)))))
    ok = worst_id <= MOREAU_IDENTITY_TOL and worst_inner <= MOREAU_INNER_TOL
    report(3, ok, f"{len(_results)} solutions, worst |y - x - W^-1 A^T lam| {worst_id:.2e} "
                  f"(limit {MOREAU_IDENTITY_TOL:g}), worst |<x, y - x>_W| {worst_inner:.2e} "
                  f"(limit {MOREAU_INNER_TOL:g})")
    assert worst_id <= MOREAU_IDENTITY_TOL
    assert worst_inner <= MOREAU_INNER_TOL


@pytest.mark.parametrize("name", ASYMPTOTIC)
def test_4_asymptotic_convergence(report, name):
    warm_up()
    s = generate_signal(ASYM_SPEC)
    cone = build_cone_system(s)
    ref = reference_solution(s, cone).x
    ctl = IterControl(max_iterations=ASYM_MAX_ITER, stop_tolerance=ASYM_DISTANCE, reference=ref, trace_stride=100)
    start = time.process_time()
    trace = SOLVERS[name].run(s, cone, ctl)
    elapsed = time.process_time() - start
    dist = float(np.linalg.norm(trace.result.x - ref))
    ok = dist < ASYM_DISTANCE and trace.result.iterations <= ASYM_MAX_ITER and elapsed <= ASYM_SECONDS
    report(4, ok, f"{name}: distance {dist:.2e} (limit {ASYM_DISTANCE:g}) after {trace.result.iterations} "
                  f"iterations, {elapsed:.2f} s CPU")
    assert dist < ASYM_DISTANCE
    assert elapsed <= ASYM_SECONDS


def test_5a_noise_ordering(report):
    specs = [SignalSpec("S2", 50, 0.5, seed) for seed in SEEDS]
    recs = run_grid(specs, ["admm", "hildreth", "dykstra"], [NOISE_BUDGET], stop_tolerance=1e-300)
    dist = {(r.solver, r.spec.seed): r.terminal.l2_distance for r in recs}
    wins = [dist["admm", k] < dist["hildreth", k] and dist["admm", k] < dist["dykstra", k] for k in SEEDS]
    detail = "; ".join(f"seed {k}: admm {dist['admm', k]:.1e} hildreth {dist['hildreth', k]:.1e} "
                       f"dykstra {dist['dykstra', k]:.1e}" for k in SEEDS)
    ok = sum(wins) >= MIN_AGREEING
    report("5a", ok, f"ADMM strictly best on {sum(wins)}/{len(wins)} seeds ({detail})")
    assert ok


@pytest.mark.parametrize("sigma", [0.01, 0.1])
def test_5b_warm_start_ordering(report, sigma):
    holds = []
    lines = []
    for seed in SEEDS:
        s = generate_signal(SignalSpec("S1", 500, sigma, seed))
        cone = build_cone_system(s)
        # reference independent of both MPDB and Meyer
        ref = block_active_set_solve(s, cone).result
        assert ref.certificate.passes(CERT_TOL)
        ctl = IterControl(max_iterations=10**9, time_budget=WARM_BUDGET)
        plain = mpdb_solve(s, cone, ctl).result
        warm = mpdb_solve(s, cone, ctl, init="pav").result
        meyer = meyer_solve(s, cone, ctl, init="full").result
        d_warm = float(np.linalg.norm(warm.x - ref.x))
        d_meyer = float(np.linalg.norm(meyer.x - ref.x))
        ok = (warm.converged and warm.certificate.passes(CERT_TOL)
              and warm.info["crossings"] < plain.info["crossings"] and d_warm <= d_meyer)
        holds.append(ok)
        lines.append(f"seed {seed}: crossings {warm.info['crossings']} vs {plain.info['crossings']}, "
                     f"distance {d_warm:.1e} vs meyer-full {d_meyer:.1e}")
    passed = sum(holds) >= MIN_AGREEING
    report("5b", passed, f"sigma={sigma}: ordering holds on {sum(holds)}/{len(holds)} seeds ({'; '.join(lines)})")
    assert passed


def test_6_pav_warm_start(report):
    rng = np.random.default_rng(6)
    worst = -np.inf
    for t in range(PAV_SIGNALS):
        if t % 4 == 3:
            fam = ("S1", "S2", "S3")[t % 3]
            s = generate_signal(SignalSpec(fam, int(rng.integers(3, PAV_MAX_N + 1)),
                                           float(rng.choice([0.0, 0.01, 0.1, 0.5])), t))
        else:
            s = random_signal(rng, (3, PAV_MAX_N), t)
        cone = build_cone_system(s)
        x, _ = pav_warm_start(s, cone)
        worst = max(worst, float(cone.apply(x).max()))
    s = generate_signal(SignalSpec("S1", PAV_MAX_N, 0.1, 0))
    cone = build_cone_system(s)
    pav_warm_start(s, cone)
    start = time.perf_counter()
    pav_warm_start(s, cone)
    elapsed = time.perf_counter() - start
    ok = worst <= PAV_FEASIBILITY and elapsed < PAV_SECONDS
    report(6, ok, f"{PAV_SIGNALS} signals, worst max(Ax) {worst:.2e} (limit {PAV_FEASIBILITY:g}); "
                  f"n={PAV_MAX_N} run {1e3 * elapsed:.1f} ms (limit {1e3 * PAV_SECONDS:g} ms)")
    assert worst <= PAV_FEASIBILITY
    assert elapsed < PAV_SECONDS


def test_7_kernels(report):
    rng = np.random.default_rng(7)
    # Sherman-Morrison: column replacements as in a sector walk, no refresh
    n = 40
    t = TrackedInverse(np.eye(n) * 3 + rng.uniform(-0.5, 0.5, (n, n)) / n, refresh_period=10**9)
    for _ in range(SM_CHAIN):
        k = int(rng.integers(n))
        col = rng.uniform(-0.5, 0.5, n) / n
        col[k] += rng.uniform(2.0, 4.0)
        t.replace_column(k, col)
    sm_err = float(np.abs(t.inverse - np.linalg.inv(t.matrix)).max())
    # pseudoinverse appends
    cols = rng.standard_normal((80, PINV_CHAIN))
    p = TrackedPinv(n_rows=80)
    for c in cols.T:
        p.append_column(c)
    pinv_err = float(np.abs(p.pinv - np.linalg.pinv(cols)).max())
    # banded solve
    M = np.zeros((BANDED_N, BANDED_N))
    for k in (1, 2):
        off = rng.uniform(-1, 1, BANDED_N - k)
        M += np.diag(off, k) + np.diag(off, -k)
    M += np.diag(np.abs(M).sum(axis=1) + rng.uniform(0.5, 2.0, BANDED_N))
    b = rng.standard_normal(BANDED_N)
    ref = np.linalg.solve(M, b)
    band_err = float(np.abs(banded_spd_solve(M, b) - ref).max() / np.abs(ref).max())
    ok = sm_err <= SM_TOL and pinv_err <= PINV_TOL and band_err <= BANDED_TOL
    report(7, ok, f"SM chain {SM_CHAIN}: {sm_err:.1e} (limit {SM_TOL:g}); pinv chain {PINV_CHAIN}: "
                  f"{pinv_err:.1e} (limit {PINV_TOL:g}); banded n={BANDED_N}: {band_err:.1e} relative "
                  f"(limit {BANDED_TOL:g})")
    assert sm_err <= SM_TOL and pinv_err <= PINV_TOL and band_err <= BANDED_TOL


def test_8_block_structure(report):
    lines, ok = [], True
    for seed in SEEDS:
        s = generate_signal(SignalSpec(seed=seed, **BLOCK_SPEC))
        cone = build_cone_system(s)
        r = block_active_set_solve(s, cone).result
        part = r.info["partition"]
        x_sys, _ = solve_block_system(s, r.info["knots"])
        x_mpdb = mpdb_solve(s, cone).result.x
        gap = float(np.abs(x_sys - x_mpdb).max())
        good = r.certificate.passes(CERT_TOL) and part.k < s.n / 2 and gap <= BLOCK_TOL
        ok &= good
        lines.append(f"seed {seed}: k={part.k}, gap {gap:.1e}")
    report(8, ok, f"n={BLOCK_SPEC['n']}, k < {BLOCK_SPEC['n'] // 2} and gap <= {BLOCK_TOL:g} ({'; '.join(lines)})")
    assert ok


def _strip_columns(text: str, drop: set) -> tuple:
    rows = list(csv.reader(io.StringIO(text)))
    keep = [i for i, h in enumerate(rows[0]) if h not in drop]
    return tuple(tuple(r[i] for i in keep) for r in rows)


def _cpu_monotone(text: str) -> bool:
    rows = list(csv.DictReader(io.StringIO(text)))
    last: dict = {}
    for r in rows:
        key = tuple(r[k] for k in ("solver", "family", "n", "sigma", "seed", "budget_s"))
        if r["cpu_s"] == "":
            continue
        cpu = float(r["cpu_s"])
        if cpu < last.get(key, -np.inf):
            return False
        last[key] = cpu
    return True


def test_9_cli_determinism(report, tmp_path, capsys):
    data = tmp_path / "data.csv"
    sig = validation_signal(9, 1, 20)
    data.write_text("z,y,w\n" + "".join(f"{a!r},{b!r},{c!r}\n" for a, b, c in zip(sig.z, sig.y, sig.w)))
    checks = {}

    def twice(argv, files=()):
        outs = []
        for k in range(2):
            args = [a.replace("{k}", str(k)) for a in argv]
            code = cli_main(args)
            out = capsys.readouterr().out
            outs.append((code, out, tuple((tmp_path / f.replace("{k}", str(k))).read_text() for f in files)))
        return outs

    for solver in ("mpdb-pav", "hildreth", "admm", "block"):
        for fmt in ("csv", "json"):
            a, b = twice(["solve", "--solver", solver, "--input", str(data), "--format", fmt])
            checks[f"solve {solver} {fmt}"] = a == b
    a, b = twice(["benchmark", "--families", "s1,s2", "--sizes", "30", "--sigmas", "0.1", "--seeds", "0,1",
                  "--solvers", "hildreth,admm,dykstra,mpdb,meyer-pav,block", "--budgets", "30",
                  "--max-iter", "3000", "--trace-stride", "50", "--out", str(tmp_path / "b{k}")],
                 files=("b{k}/records.csv", "b{k}/summary.csv"))
    checks["benchmark records"] = (_strip_columns(a[2][0], {"cpu_s"}) == _strip_columns(b[2][0], {"cpu_s"})
                                   and _cpu_monotone(a[2][0]) and _cpu_monotone(b[2][0]))
    checks["benchmark summary"] = (_strip_columns(a[2][1], {"terminal_cpu_s"})
                                   == _strip_columns(b[2][1], {"terminal_cpu_s"}))
    a, b = twice(["validate", "--trials", "20", "--seed", "9", "--out", str(tmp_path / "v{k}.csv")],
                 files=("v{k}.csv",))
    checks["validate"] = a == b and a[0] == 0
    bad = [k for k, v in checks.items() if not v]
    report(9, not bad, f"{len(checks)} commands repeated, mismatches: {', '.join(bad) or 'none'}")
    assert not bad
