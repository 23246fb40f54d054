"""Pool-adjacent-violators style warm start and the exhaustive small-n oracle."""
from __future__ import annotations

import itertools

import numba
import numpy as np

from .errors import ConeRegressionError, OracleError, RankDeficientError
from .geometry import ConeSystem, Signal, build_cone_system, kkt_certificate, project_equality, weighted_sse
from .trace import SolverResult

__all__ = ["pav_warm_start", "brute_force_project", "ORACLE_TOL", "MAX_ORACLE_CONSTRAINTS"]

ORACLE_TOL = 1e-9
MAX_ORACLE_CONSTRAINTS = 20


DEFAULT_PASSES = 5
DEFAULT_ROUNDS = 30


@numba.njit(cache=True)
def _projection_sweeps(bands, winv, rdiag, x, lam, passes, release):
    """Left-to-right sweeps projecting ``x`` onto every violated ``K_i``.

    Each projection is the weighted line fit of the three points of ``K_i``;
    its step ``t`` is accumulated in ``lam[i]`` so that
    ``x = y - W^{-1} A^T lam`` holds throughout. Returns the number of sweeps
    run and the number of projections.
    """
    m = bands.shape[0]
    count = 0
    for p in range(passes):
        violated = False
        for i in range(m):
            av = bands[i, 0] * x[i] + bands[i, 1] * x[i + 1] + bands[i, 2] * x[i + 2]
            if av > 0.0 or (release and lam[i] > 0.0):
                t = max(av * rdiag[i], -lam[i])
                lam[i] += t
                x[i] -= t * bands[i, 0] * winv[i]
                x[i + 1] -= t * bands[i, 1] * winv[i + 1]
                x[i + 2] -= t * bands[i, 2] * winv[i + 2]
                count += 1
                violated = True
        if not violated:
            return p, count
    return passes, count


@numba.njit(cache=True)
def _pool_slopes(z, x):
    """Make the slopes of ``x`` non-increasing by pooling adjacent violators.

    Slopes are pooled with the interval lengths as weights, so a pooled run
    becomes the chord between its end points. Returns the new values
    (anchored at ``x[0]``) and the number of merges.
    """
    n = x.shape[0]
    m = n - 1
    val = np.empty(m)
    wt = np.empty(m)
    first = np.empty(m, dtype=np.int64)
    top = -1
    merges = 0
    for i in range(m):
        d = z[i + 1] - z[i]
        top += 1
        val[top] = (x[i + 1] - x[i]) / d
        wt[top] = d
        first[top] = i
        while top >= 1 and val[top] > val[top - 1]:
            val[top - 1] = (val[top] * wt[top] + val[top - 1] * wt[top - 1]) / (wt[top] + wt[top - 1])
            wt[top - 1] += wt[top]
            top -= 1
            merges += 1
    out = np.empty(n)
    out[0] = x[0]
    k = 0
    for i in range(m):
        while k < top and first[k + 1] <= i:
            k += 1
        out[i + 1] = out[i] + val[k] * (z[i + 1] - z[i])
    return out, merges


def _row_norms_inv(cone: ConeSystem) -> np.ndarray:
    b, wi = cone.bands, cone.winv
    return 1.0 / (b[:, 0] ** 2 * wi[:-2] + b[:, 1] ** 2 * wi[1:-1] + b[:, 2] ** 2 * wi[2:])


def _pool(signal: Signal, x: np.ndarray) -> np.ndarray:
    """Pool slopes of ``x`` and restore its weighted mean."""
    pooled, merges = _pool_slopes(signal.z, x)
    if merges > 10 * signal.n:
        raise ConeRegressionError(f"slope pooling did not terminate (n={signal.n})")
    w = signal.w
    return pooled + float(np.dot(w, x - pooled)) / float(w.sum())


def pav_warm_start(signal: Signal, cone: ConeSystem | None = None, passes: int = DEFAULT_PASSES,
                   return_multipliers: bool = False, rounds: int = DEFAULT_ROUNDS,
                   release: bool = False):
    """Fast primal-feasible approximation of the concave fit.

    Starting from ``y``, violated constraints are removed by projecting the
    current iterate onto the half-space ``K_i`` (the weighted line fit of its
    three points), sweeping left to right. The sweeps converge only in the
    limit, so after ``passes`` sweeps the remaining violations are removed in
    one linear-time step: the slopes are pooled until they are non-increasing
    and the result is shifted to keep the weighted mean.

    The pooled point fixes a face of the cone (its saturated constraints).
    Each refinement round projects ``y`` onto that face with a banded solve
    and pools the projection again. The feasible candidate with the smallest
    weighted distance to ``y`` is returned; for feasible ``x`` this distance
    bounds the error, ``||x - x*||^2 <= ||x - y||^2 - ||x* - y||^2``.

    Parameters
    ----------
    signal : Signal
    cone : ConeSystem, optional
    passes : int
        Number of projection sweeps before the pooling step.
    return_multipliers : bool
        Also return multipliers of the projection onto the estimated face.
    rounds : int
        Number of face-projection refinement rounds.
    release : bool
        Let sweeps also decrease accumulated steps (clamped at zero), which
        turns them into Hildreth cycles.

    Returns
    -------
    x : ndarray
        Concave point (``A x <= 0`` up to rounding); not optimal in general.
    estimate : tuple of int
        Constraints saturated at ``x`` (slack at most ``1e-9 * max(1, ||y||_inf)``).
    lam : ndarray
        Only with ``return_multipliers``.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    if passes < 0 or rounds < 0:
        raise ValueError("passes and rounds must be >= 0")
    x = signal.y.copy()
    lam = np.zeros(cone.m)
    _projection_sweeps(cone.bands, cone.winv, _row_norms_inv(cone), x, lam, passes, release)
    scale = max(1.0, float(np.abs(signal.y).max()))
    thr = 1e-9 * scale

    def saturated(v):
        return np.flatnonzero(-cone.apply(v) <= thr)

    if cone.apply(x).max() > 0.0:
        x = _pool(signal, x)
        best, best_obj = x, weighted_sse(signal, x)
        for _ in range(rounds):
            try:
                xf, _ = project_equality(signal, cone, saturated(x), method="banded")
            except RankDeficientError:
                break
            if cone.apply(xf).max() <= 0.0:
                obj = weighted_sse(signal, xf)
                if obj < best_obj:
                    best, best_obj = xf, obj
                break
            x = _pool(signal, xf)
            obj = weighted_sse(signal, x)
            if obj < best_obj:
                best, best_obj = x, obj
        x = best
        if return_multipliers:
            try:
                lam = project_equality(signal, cone, saturated(x), method="banded")[1]
            except RankDeficientError:
                lam = np.zeros(cone.m)
    estimate = tuple(int(i) for i in saturated(x))
    if return_multipliers:
        return x, estimate, lam
    return x, estimate


def _subsets_by_size(m: int, k: int) -> np.ndarray:
    if k == 0:
        return np.zeros((1, 0), dtype=np.int64)
    return np.array(list(itertools.combinations(range(m), k)), dtype=np.int64)


def brute_force_project(signal: Signal, cone: ConeSystem | None = None, tol: float = ORACLE_TOL) -> SolverResult:
    """Exact projection by enumerating every candidate saturated set.

    For each subset ``S`` of constraints the equality-constrained projection
    is obtained from the normal equations ``A_S W^{-1} A_S^T lam_S = A_S y``
    (solved in batches per subset size). A candidate is kept when it is
    primal feasible and its multipliers are nonnegative, both within
    ``tol * max(1, ||y||_inf)``. All kept candidates must agree.

    Raises
    ------
    ValueError
        If ``m > 20``.
    OracleError
        If no candidate passes, or two passing candidates differ.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    m, n = cone.m, cone.n
    if m > MAX_ORACLE_CONSTRAINTS:
        raise ValueError(f"enumeration limited to m <= {MAX_ORACLE_CONSTRAINTS}, got m={m}")
    y, winv = signal.y, cone.winv
    A = np.asarray(cone.A)
    G = (A * winv) @ A.T
    Ay = A @ y
    scale = max(1.0, float(np.abs(y).max()))
    thr = tol * scale
    best = None
    passing = []
    for k in range(m + 1):
        S = _subsets_by_size(m, k)
        lam = np.zeros((len(S), m))
        if k:
            Gs = G[S[:, :, None], S[:, None, :]]
            lam_s = np.linalg.solve(Gs, Ay[S][..., None])[..., 0]
            np.put_along_axis(lam, S, lam_s, axis=1)
        X = y - (lam @ A) * winv
        AX = X @ A.T
        ok = (AX.max(axis=1, initial=-np.inf) <= thr) & (lam.min(axis=1, initial=0.0) >= -thr)
        for idx in np.flatnonzero(ok):
            passing.append((tuple(int(i) for i in S[idx]), X[idx], lam[idx]))
            if best is None:
                best = passing[-1]
    if best is None:
        raise OracleError("no subset satisfies the KKT conditions; tolerance too tight?")
    for S, X, _ in passing:
        if np.abs(X - best[1]).max() > 1e3 * thr:
            raise OracleError(f"KKT points for subsets {best[0]} and {S} differ")
    S, x, lam = best
    lam = np.where(lam > 0.0, lam, 0.0)
    cert = kkt_certificate(signal, cone, x, lam)
    return SolverResult(
        x=x.copy(), lam=lam, active_set=S, converged=True, certificate=cert, iterations=0,
        solver="brute_force", info={"passing_subsets": [p[0] for p in passing]},
    )
