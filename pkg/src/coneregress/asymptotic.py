"""Iterative solvers that converge in the limit: Hildreth, Dykstra, LSPS, Uzawa, ADMM.

Every solver takes a :class:`~coneregress.trace.IterControl` and returns a
:class:`~coneregress.trace.SolverTrace`. Exhausting the budget is not an
error: the last iterate is returned with ``converged=False``.

The inner loops are compiled with numba and run ``trace_stride`` iterations
between samples.
"""
from __future__ import annotations

import numpy as np
import numba
import scipy.linalg as sla

from .errors import StepSizeError
from .geometry import ConeSystem, Signal
from .kernels import BandedSPD
from .trace import IterControl, Recorder, SolverTrace

__all__ = [
    "hildreth_solve",
    "dykstra_solve",
    "lsps_solve",
    "uzawa_solve",
    "admm_solve",
    "project_single",
    "dual_spectral_bound",
    "admm_penalty",
    "warm_up",
]

DIVERGENCE_WINDOW = 100


@numba.njit(cache=True)
def _project_single(bands, winv, rdiag, i, v):
    """Weighted projection of the 3-vector ``v`` (points i..i+2) onto ``K_i``."""
    a0, a1, a2 = bands[i, 0], bands[i, 1], bands[i, 2]
    av = a0 * v[0] + a1 * v[1] + a2 * v[2]
    if av <= 0.0:
        return 0.0
    t = av * rdiag[i]
    v[0] -= t * a0 * winv[i]
    v[1] -= t * a1 * winv[i + 1]
    v[2] -= t * a2 * winv[i + 2]
    return t


def project_single(cone: ConeSystem, i: int, v) -> np.ndarray:
    """Project the three values ``v`` at points ``i, i+1, i+2`` onto constraint ``i``.

    When the constraint is violated this is the weighted straight-line fit of
    the three points.
    """
    out = np.array(v, dtype=float)
    _project_single(cone.bands, cone.winv, _row_norms_inv(cone), i, out)
    return out


def _row_norms_inv(cone: ConeSystem) -> np.ndarray:
    b, wi = cone.bands, cone.winv
    return 1.0 / (b[:, 0] ** 2 * wi[:-2] + b[:, 1] ** 2 * wi[1:-1] + b[:, 2] ** 2 * wi[2:])


@numba.njit(cache=True)
def _hildreth_cycles(bands, winv, rdiag, order, lam, x, ncycles):
    for _ in range(ncycles):
        for i in order:
            a0, a1, a2 = bands[i, 0], bands[i, 1], bands[i, 2]
            ax = a0 * x[i] + a1 * x[i + 1] + a2 * x[i + 2]
            new = lam[i] + ax * rdiag[i]
            if new < 0.0:
                new = 0.0
            d = new - lam[i]
            if d != 0.0:
                x[i] -= d * a0 * winv[i]
                x[i + 1] -= d * a1 * winv[i + 1]
                x[i + 2] -= d * a2 * winv[i + 2]
                lam[i] = new


@numba.njit(cache=True)
def _dykstra_cycles(bands, winv, rdiag, R, lam, x, ncycles):
    m = bands.shape[0]
    v = np.empty(3)
    for _ in range(ncycles):
        for i in range(m):
            for k in range(3):
                v[k] = x[i + k] - R[i, k]
            p0, p1, p2 = v[0], v[1], v[2]
            lam[i] = _project_single(bands, winv, rdiag, i, v)
            R[i, 0] = v[0] - p0
            R[i, 1] = v[1] - p1
            R[i, 2] = v[2] - p2
            for k in range(3):
                x[i + k] = v[k]


@numba.njit(cache=True)
def _lsps_cycles(bands, winv, rdiag, E, lam, x, relax, ncycles):
    m = bands.shape[0]
    n = x.shape[0]
    v = np.empty(3)
    acc = np.zeros(n)
    for _ in range(ncycles):
        acc[:] = 0.0
        for i in range(m):
            for k in range(3):
                v[k] = x[i + k] + E[i, k]
            lam[i] = _project_single(bands, winv, rdiag, i, v)
            for k in range(3):
                step = v[k] - x[i + k]  # (u_i - x) on the support of K_i
                acc[i + k] += step
                E[i, k] -= relax * step
        for j in range(n):
            x[j] += relax * acc[j] / m


@numba.njit(cache=True)
def _uzawa_steps(bands, winv, w, y, mu, x, rho, nsteps, ring, state):
    """Run ``nsteps`` Uzawa steps; returns True once divergence is detected.

    ``ring`` flags, for the last ``len(ring)`` steps, whether ``0.5 ||x||_W^2``
    rose by more than rounding; ``state`` holds (previous value, position,
    number of flagged steps).
    """
    m = bands.shape[0]
    n = y.shape[0]
    window = ring.shape[0]
    for _ in range(nsteps):
        for i in range(m):
            ax = bands[i, 0] * x[i] + bands[i, 1] * x[i + 1] + bands[i, 2] * x[i + 2]
            mu[i] = max(0.0, mu[i] + rho * ax)
        for j in range(n):
            x[j] = y[j]
        for i in range(m):
            if mu[i] != 0.0:
                x[i] -= winv[i] * bands[i, 0] * mu[i]
                x[i + 1] -= winv[i + 1] * bands[i, 1] * mu[i]
                x[i + 2] -= winv[i + 2] * bands[i, 2] * mu[i]
        obj = 0.0
        for j in range(n):
            obj += 0.5 * w[j] * x[j] * x[j]
        pos = int(state[1])
        rose = obj > state[0] + 1e-10 * max(1.0, abs(state[0]))
        state[2] += (1.0 if rose else 0.0) - ring[pos]
        ring[pos] = 1.0 if rose else 0.0
        state[1] = (pos + 1) % window
        state[0] = obj
        if not np.isfinite(obj) or state[2] >= window // 2:
            return True
    return False


@numba.njit(cache=True)
def _banded_cho_solve(U, b, out):
    """Solve ``U^T U x = b`` with ``U`` in upper band storage (3 rows)."""
    n = b.shape[0]
    for j in range(n):
        s = b[j]
        if j >= 1:
            s -= U[1, j] * out[j - 1]
        if j >= 2:
            s -= U[0, j] * out[j - 2]
        out[j] = s / U[2, j]
    for j in range(n - 1, -1, -1):
        s = out[j]
        if j + 1 < n:
            s -= U[1, j + 1] * out[j + 1]
        if j + 2 < n:
            s -= U[0, j + 2] * out[j + 2]
        out[j] = s / U[2, j]


@numba.njit(cache=True)
def _admm_steps(bands, U, wy2, inv_gamma, x, z, u, ax, nsteps):
    m = bands.shape[0]
    n = x.shape[0]
    rhs = np.empty(n)
    dual_res = 0.0
    for _ in range(nsteps):
        for j in range(n):
            rhs[j] = wy2[j]
        for i in range(m):
            c = inv_gamma * (z[i] - u[i])
            rhs[i] += bands[i, 0] * c
            rhs[i + 1] += bands[i, 1] * c
            rhs[i + 2] += bands[i, 2] * c
        _banded_cho_solve(U, rhs, x)
        dual_res = 0.0
        for i in range(m):
            ax[i] = bands[i, 0] * x[i] + bands[i, 1] * x[i + 1] + bands[i, 2] * x[i + 2]
            znew = min(0.0, ax[i] + u[i])
            dual_res = max(dual_res, abs(znew - z[i]))
            z[i] = znew
            u[i] += ax[i] - z[i]
    return dual_res


_WARM = False


def warm_up() -> None:
    """Compile (or load from cache) every numba kernel once per process.

    Called before any solver starts its CPU clock, so budgets measure
    iterations rather than compilation.
    """
    global _WARM
    if _WARM:
        return
    _WARM = True
    from .warmstart import pav_warm_start

    tiny = Signal.from_values([0.0, -1.0, 0.5, 1.0, 0.0])
    ctl = IterControl(max_iterations=2)
    for solve in (hildreth_solve, dykstra_solve, lsps_solve, uzawa_solve, admm_solve):
        solve(tiny, ctl=ctl)
    pav_warm_start(tiny)


def _prepare(signal: Signal, cone: ConeSystem | None):
    from .geometry import build_cone_system

    warm_up()
    return cone if cone is not None else build_cone_system(signal)


def _run(rec: Recorder, ctl: IterControl, advance, current):
    """Drive ``advance(k)`` in chunks of ``trace_stride`` until a stop rule fires.

    Returns ``(iterations, converged)``. ``current()`` yields ``(x, lam)``.
    """
    it = 0
    x, lam = current()
    rec.record(0, x, lam)
    while it < ctl.max_iterations and not rec.out_of_time():
        k = min(ctl.trace_stride, ctl.max_iterations - it)
        advance(k)
        it += k
        x, lam = current()
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(lam))):
            raise StepSizeError(f"iterates became non-finite after {it} iterations; reduce the step size")
        sample = rec.record(it, x, lam)
        if rec.converged(sample):
            return it, True
    return it, False


def hildreth_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
                   order=None) -> SolverTrace:
    """Hildreth's method: cyclic coordinate ascent on the dual, ``lam >= 0`` kept by clamping.

    Each step sets ``lam_i <- max(0, lam_i + (A_i x) / (A_i W^{-1} A_i^T))``
    and updates ``x = y - W^{-1} A^T lam`` locally. One iteration is a full
    cycle over ``order`` (default ``0..m-1``).
    """
    cone = _prepare(signal, cone)
    ctl = ctl or IterControl()
    m = cone.m
    order = np.arange(m) if order is None else np.asarray(order, dtype=np.int64)
    if sorted(order.tolist()) != list(range(m)):
        raise ValueError("order must be a permutation of range(m)")
    rdiag = _row_norms_inv(cone)
    lam = np.zeros(m)
    x = signal.y.copy()
    rec = Recorder(signal, cone, ctl)

    def advance(k):
        _hildreth_cycles(cone.bands, cone.winv, rdiag, order, lam, x, k)
        # resynchronise the primal iterate to avoid drift
        x[:] = signal.y - cone.winv * cone.apply_transpose(lam)

    it, conv = _run(rec, ctl, advance, lambda: (x, lam))
    return rec.finish(x.copy(), lam.copy(), it, conv, "hildreth")


def dykstra_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
                  return_residuals: bool = False) -> SolverTrace:
    """Dykstra's cyclic projections with one correction term per constraint.

    Before projecting onto ``K_i`` the previous increment ``R_i`` is removed;
    afterwards ``R_i`` is set to the new increment, so ``x = y + sum_i R_i``
    after every step. The increments (an ``m x 3`` array over the supporting
    points) are exposed in ``result.info["residuals"]``.
    """
    cone = _prepare(signal, cone)
    ctl = ctl or IterControl()
    m = cone.m
    rdiag = _row_norms_inv(cone)
    R = np.zeros((m, 3))
    lam = np.zeros(m)
    x = signal.y.copy()
    rec = Recorder(signal, cone, ctl)

    def advance(k):
        _dykstra_cycles(cone.bands, cone.winv, rdiag, R, lam, x, k)

    it, conv = _run(rec, ctl, advance, lambda: (x, lam))
    return rec.finish(x.copy(), lam.copy(), it, conv, "dykstra", residuals=R.copy())


def lsps_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
               relaxation=1.0, allow_over_relaxation: bool = False) -> SolverTrace:
    """Least squares in a product space.

    Works on ``m`` copies of the iterate, one per half-space ``K_i``; each
    cycle projects every copy (with its Dykstra correction) onto its own
    ``K_i`` in parallel, then averages the copies (projection onto the
    diagonal subspace) with relaxation ``relaxation``. The corrections keep
    the fixed point equal to the projection of ``y`` onto ``K``.

    ``relaxation`` is a number or a callable ``k -> lambda_k``.
    """
    cone = _prepare(signal, cone)
    ctl = ctl or IterControl()
    schedule = relaxation if callable(relaxation) else (lambda k, r=float(relaxation): r)
    m = cone.m
    rdiag = _row_norms_inv(cone)
    E = np.zeros((m, 3))
    lam = np.zeros(m)
    x = signal.y.copy()
    rec = Recorder(signal, cone, ctl)
    state = {"k": 0}

    def advance(k):
        for _ in range(k):
            r = float(schedule(state["k"]))
            if not (0.0 < r <= 2.0) and not (allow_over_relaxation and r > 0.0):
                raise ValueError(f"relaxation {r} outside (0, 2]; pass allow_over_relaxation=True")
            _lsps_cycles(cone.bands, cone.winv, rdiag, E, lam, x, r, 1)
            state["k"] += 1

    def current():
        # E_i = m lam_i W^{-1} a_i at a fixed point
        lam_est = np.sum(E * cone.bands, axis=1) * rdiag / m
        lam[:] = np.maximum(lam_est, 0.0)
        return x, lam

    it, conv = _run(rec, ctl, advance, current)
    x_out, lam_out = current()
    return rec.finish(x_out.copy(), lam_out.copy(), it, conv, "lsps")


def dual_spectral_bound(cone: ConeSystem) -> float:
    """Largest eigenvalue of ``A W^{-1} A^T`` (the Lipschitz constant of the dual gradient)."""
    ab = cone.gram_bands()
    if cone.m == 1:
        return float(ab[2, 0])
    vals = sla.eig_banded(ab, lower=False, eigvals_only=True, select="i",
                          select_range=(cone.m - 1, cone.m - 1))
    return float(vals[-1])


def admm_penalty(cone: ConeSystem) -> float:
    """Spectral choice of the ADMM index ``gamma``.

    Returns ``sqrt(l_min * l_max)`` of ``A (2W)^{-1} A^T``, the penalty that
    minimizes the worst-case linear rate bound for inequality-constrained
    quadratic programs (Ghadimi et al., 2015). The solver's own default is
    ``gamma = 1``; the benchmark uses this value.
    """
    ab = cone.gram_bands() / 2.0
    if cone.m == 1:
        return float(ab[2, 0])
    lo = sla.eig_banded(ab, lower=False, eigvals_only=True, select="i", select_range=(0, 0))[0]
    hi = sla.eig_banded(ab, lower=False, eigvals_only=True, select="i",
                        select_range=(cone.m - 1, cone.m - 1))[0]
    return float(np.sqrt(max(lo, 0.0) * hi)) or 1.0


def uzawa_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
                rho: float | None = None) -> SolverTrace:
    """Uzawa's saddle-point iteration.

    Alternates the exact primal minimizer ``x = y - W^{-1} A^T mu`` with the
    projected ascent step ``mu <- max(0, mu + rho A x)``. The default ``rho``
    is ``1 / lambda_max(A W^{-1} A^T)``; ``rho`` above ``2 / lambda_max``
    diverges and is reported through :class:`StepSizeError`.
    """
    cone = _prepare(signal, cone)
    ctl = ctl or IterControl()
    if rho is None:
        rho = 1.0 / dual_spectral_bound(cone)
    if rho <= 0:
        raise ValueError("rho must be positive")
    mu = np.zeros(cone.m)
    x = signal.y.copy()
    rec = Recorder(signal, cone, ctl)
    ring = np.zeros(DIVERGENCE_WINDOW)
    state = np.array([0.5 * float(np.dot(cone.weights, x * x)), 0.0, 0.0])

    def advance(k):
        if _uzawa_steps(cone.bands, cone.winv, cone.weights, signal.y, mu, x, float(rho), k, ring, state):
            raise StepSizeError(
                f"dual objective rose in {int(state[2])} of the last {DIVERGENCE_WINDOW} steps "
                f"with rho={rho:.3g}; the step size is too large"
            )

    it, conv = _run(rec, ctl, advance, lambda: (x, mu))
    return rec.finish(x.copy(), mu.copy(), it, conv, "uzawa", rho=float(rho))


def admm_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
               gamma: float = 1.0) -> SolverTrace:
    """ADMM on the splitting ``z = A x``, ``z <= 0``.

    With ``f(x) = ||y - x||_W^2`` and scaled multiplier ``u``:

    * ``x``: solve ``(2W + A^T A / gamma) x = 2 W y + A^T (z - u) / gamma``
      with a cached banded Cholesky factor;
    * ``z = min(0, A x + u)``;
    * ``u <- u + A x - z``.

    The reported multipliers are ``u / (2 gamma)``, matching the convention
    ``x = y - W^{-1} A^T lam``.
    """
    cone = _prepare(signal, cone)
    ctl = ctl or IterControl()
    if gamma <= 0:
        raise ValueError("gamma must be positive")
    n, m = cone.n, cone.m
    inv_gamma = 1.0 / gamma
    # A^T A from the row bands, plus 2W on the diagonal
    ab = np.zeros((3, n))
    b = cone.bands
    for k in range(3):
        np.add.at(ab[2], np.arange(m) + k, inv_gamma * b[:, k] ** 2)
    for k in range(2):
        np.add.at(ab[1], np.arange(m) + k + 1, inv_gamma * b[:, k] * b[:, k + 1])
    np.add.at(ab[0], np.arange(m) + 2, inv_gamma * b[:, 0] * b[:, 2])
    ab[2] += 2.0 * cone.weights
    U = BandedSPD(ab).factor
    wy2 = 2.0 * cone.weights * signal.y
    x = signal.y.copy()
    ax = cone.apply(x)
    z = np.minimum(ax, 0.0)
    u = np.zeros(m)
    lam = np.zeros(m)
    rec = Recorder(signal, cone, ctl)
    residuals = {"primal": [], "dual": []}

    def advance(k):
        dres = _admm_steps(cone.bands, U, wy2, inv_gamma, x, z, u, ax, k)
        residuals["primal"].append(float(np.linalg.norm(ax - z)))
        residuals["dual"].append(float(dres))

    def current():
        lam[:] = u / (2.0 * gamma)
        return x, lam

    it, conv = _run(rec, ctl, advance, current)
    x_out, lam_out = current()
    return rec.finish(x_out.copy(), lam_out.copy(), it, conv, "admm", z=z.copy(),
                      primal_residuals=residuals["primal"], dual_residuals=residuals["dual"])
