"""Active-set solvers that terminate after finitely many steps.

* :func:`mpdb_solve`: mixed primal-dual basis walk (Fraser and Massam).
* :func:`meyer_solve`: hinge algorithm (Meyer).
* :func:`critical_index_solve`: nearest point in a simplicial cone with
  critical-index deflation (Murty and Fathi).
* :func:`block_active_set_solve`: primal active-set method on block
  partitions, solving the small ``3k - 1`` KKT system per step.

Index conventions (0-based): constraint ``j`` involves points ``j, j+1,
j+2``. A constraint is *saturated* when ``(A x)_j = 0``; the set of
non-saturated constraints is called the hinge set ``J``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

import numpy as np

from .errors import SingularBlockSystemError, SingularUpdateError, StalledSearchError
from .geometry import ConeSystem, Signal, build_cone_system, project_equality, recover_multipliers
from .kernels import TrackedInverse, TrackedPinv
from .trace import IterControl, Recorder, SolverTrace
from .warmstart import pav_warm_start

__all__ = [
    "ActiveSet",
    "BlockPartition",
    "MixedBasis",
    "mpdb_solve",
    "meyer_solve",
    "critical_index_solve",
    "block_active_set_solve",
    "solve_block_system",
    "TIE_TOL",
    "INTERIOR_TOL",
]

TIE_TOL = 1e-12
INTERIOR_TOL = 1e-10
WARM_FLOOR = 1e-3


@dataclass(frozen=True)
class ActiveSet:
    """Sorted subset of the constraint indices ``0..m-1``.

    What membership means depends on the solver: hinges (non-saturated
    constraints) for MPDB and Meyer, saturated constraints for the block
    solver.
    """

    indices: tuple
    m: int

    def __post_init__(self):
        idx = tuple(int(i) for i in self.indices)
        if any(b <= a for a, b in zip(idx, idx[1:])):
            raise ValueError(f"indices must be strictly increasing, got {idx}")
        if idx and (idx[0] < 0 or idx[-1] >= self.m):
            raise ValueError(f"indices must lie in [0, {self.m}), got {idx}")
        object.__setattr__(self, "indices", idx)

    @classmethod
    def of(cls, indices: Iterable[int], m: int) -> "ActiveSet":
        return cls(tuple(sorted({int(i) for i in indices})), m)

    def complement(self) -> "ActiveSet":
        s = set(self.indices)
        return ActiveSet(tuple(i for i in range(self.m) if i not in s), self.m)

    def __len__(self):
        return len(self.indices)

    def __iter__(self):
        return iter(self.indices)

    def __contains__(self, i):
        return i in set(self.indices)


def _hinges_from_init(init, signal: Signal, cone: ConeSystem, default: str):
    """Resolve ``init`` to a set of hinge (non-saturated) indices."""
    m = cone.m
    if init is None:
        init = default
    if isinstance(init, str):
        if init == "empty":
            return set()
        if init == "full":
            return set(range(m))
        if init == "pav":
            _, saturated = pav_warm_start(signal, cone)
            return set(range(m)) - set(saturated)
        raise ValueError(f"unknown init strategy {init!r}; use 'empty', 'full', 'pav' or an index set")
    if isinstance(init, ActiveSet):
        return set(init.indices)
    return set(ActiveSet.of(init, m).indices)


def _finish_exact(rec: Recorder, signal, cone, saturated, iterations, solver, **info) -> SolverTrace:
    x, lam = project_equality(signal, cone, sorted(saturated), method="auto")
    if np.all(lam > -1e-9 * rec.scale):
        lam = np.where(lam > 0.0, lam, 0.0)
    trace = rec.finish(x, lam, iterations, True, solver, **info)
    if rec.reference is None:
        trace.result.converged = trace.result.certificate.passes(rec.ctl.stop_tolerance)
    else:
        trace.result.converged = _close_to_reference(rec, x)
    return trace


def _close_to_reference(rec: Recorder, x) -> bool:
    if rec.reference is None:
        return False
    return float(np.linalg.norm(x - rec.reference)) < rec.ctl.stop_tolerance


# ---------------------------------------------------------------------------
# MPDB
# ---------------------------------------------------------------------------


@dataclass
class MixedBasis:
    """Mixed primal-dual basis ``B_J``: ``beta^j`` for ``j`` in ``J``, ``gamma^j`` otherwise.

    The last two columns are always the completion vectors. The inverse is
    tracked through Sherman-Morrison column swaps.
    """

    hinges: set
    beta: np.ndarray
    gamma: np.ndarray
    inverse: TrackedInverse = field(init=False)
    rebuilds: int = 0

    def __post_init__(self):
        self.inverse = TrackedInverse(self.matrix())

    @property
    def m(self) -> int:
        return self.gamma.shape[1] - 2

    def column(self, k: int) -> np.ndarray:
        return self.beta[:, k] if k in self.hinges else self.gamma[:, k]

    def matrix(self) -> np.ndarray:
        M = self.gamma.copy()
        if self.hinges:
            idx = sorted(self.hinges)
            M[:, idx] = self.beta[:, idx]
        return M

    def swap(self, k: int):
        """Exchange ``beta^k`` and ``gamma^k``."""
        if k in self.hinges:
            self.hinges.remove(k)
        else:
            self.hinges.add(k)
        try:
            self.inverse.replace_column(k, self.column(k))
        except SingularUpdateError:
            self.inverse = TrackedInverse(self.matrix())
            self.rebuilds += 1

    def coordinates(self, p) -> np.ndarray:
        return self.inverse.inverse @ p


def _whiten(signal: Signal, cone: ConeSystem):
    s = np.sqrt(signal.w)
    return s, s * signal.y, cone.whitened()


def mpdb_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
               init=None, max_crossings: int | None = None) -> SolverTrace:
    """Mixed primal-dual basis algorithm.

    With ``v`` the projection of ``y`` onto the affine functions and
    ``u = y - v``, a point ``p0`` of a known sector is joined to ``u`` by a
    segment. Each time the segment leaves the current sector one basis
    vector is exchanged (``beta^j <-> gamma^j``); when ``u`` itself has
    nonnegative coordinates the hinge set is final and the fit is the
    projection onto the corresponding face.

    Parameters
    ----------
    init : None, "pav", ActiveSet or iterable of hinge indices
        ``None`` starts from an interior point of the cone (all hinges).
        ``"pav"`` starts next to the pooled warm start; its hinge set is the
        constraints left non-saturated by the pooling.
    max_crossings : int, optional
        Guard on the number of sector crossings (default ``ctl.max_iterations``).

    Notes
    -----
    All computations use whitened coordinates ``sqrt(w) * x``. The trace
    records, per crossing, the distance ``||u - x^k||`` in
    ``result.info["walk_distances"]``.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    ctl = ctl or IterControl()
    cap = ctl.max_iterations if max_crossings is None else max_crossings
    sq, ys, cs = _whiten(signal, cone)
    m, n = cone.m, cone.n
    C = np.asarray(cs.gamma)
    B = np.asarray(cs.beta)
    comp = C[:, m:]
    v = comp @ (comp.T @ ys)
    u = ys - v
    unorm = float(np.linalg.norm(u))
    rec = Recorder(signal, cone, ctl)

    # a start is given by its sector (hinge set) and positive coordinates there
    eps = 1e-9 * max(unorm, 1.0)
    coords = np.zeros(n)
    if init is None or (isinstance(init, str) and init == "default"):
        hinges = set(range(m))
        coords[:m] = 1.0
        coords *= (unorm if unorm > 0 else 1.0) / max(np.linalg.norm(B[:, :m].sum(axis=1)), 1e-300)
        start = "interior"
    else:
        if isinstance(init, str) and init == "pav":
            xp, saturated, lam0 = pav_warm_start(signal, cone, return_multipliers=True)
            hinges = set(range(m)) - set(saturated)
        else:
            # explicit hinge set: coordinates of the projection onto its face
            hinges = _hinges_from_init(init, signal, cone, "pav")
            xp, lam0 = project_equality(signal, cone, sorted(set(range(m)) - hinges), method="auto")
        slack = -cone.apply(xp)
        for j in range(m):
            coords[j] = slack[j] if j in hinges else lam0[j]
        # keep p0 off the sector walls: floor tiny coordinates at a fraction of
        # the typical one, with distinct values so that no two ties coincide
        typical = float(np.mean(np.abs(coords[:m]))) if m else 0.0
        floor = max(WARM_FLOOR * typical, eps) * (1.0 + np.arange(m) / max(m, 1))
        coords[:m] = np.maximum(coords[:m], floor)
        start = "warm"
    basis = MixedBasis(set(hinges), B, C)
    p0 = basis.inverse.matrix @ coords

    def primal_at(t, c, d):
        a = c + t * d
        J = sorted(basis.hinges)
        pi = B[:, J] @ a[J] if J else np.zeros(n)
        lam = np.zeros(m)
        off = [k for k in range(m) if k not in basis.hinges]
        lam[off] = np.maximum(a[off], 0.0)
        return pi, lam

    crossings = 0
    perturbations = 0
    walk = []
    t_cur = 0.0
    last = -1
    same_t = 0
    c = basis.coordinates(p0)
    d = basis.coordinates(u - p0)
    pi, lam = primal_at(0.0, c, d)
    walk.append(float(np.linalg.norm(u - pi)))
    rec.record(0, (pi + v) / sq, lam)
    converged_walk = False
    while True:
        if crossings >= cap or rec.out_of_time():
            break
        dm = d[:m]
        with np.errstate(divide="ignore", invalid="ignore"):
            tk = np.where(dm < 0, -c[:m] / dm, np.inf)
        tk = np.maximum(tk, t_cur)
        if last >= 0 and tk[last] <= t_cur + TIE_TOL:
            tk[last] = np.inf
        k = int(np.argmin(tk)) if m else 0
        t_min = float(tk[k]) if m else np.inf
        if t_min >= 1.0:
            converged_walk = True
            break
        ties = np.flatnonzero(tk <= t_min + TIE_TOL)
        k = int(ties[0])
        same_t = same_t + 1 if t_min <= t_cur + TIE_TOL else 0
        if same_t > 2 * m:
            # cycling on a face of codimension >= 2: nudge the start inside its sector
            perturbations += 1
            if perturbations > 5:
                raise StalledSearchError("MPDB cycles at a degenerate face", state={"t": t_cur, "hinges": sorted(basis.hinges)})
            basis = MixedBasis(set(hinges), B, C)
            cdir = np.arange(1, m + 1, dtype=float) / m
            p0 = p0 + 1e-9 * max(unorm, 1.0) * (basis.inverse.matrix[:, :m] @ cdir)
            c = basis.coordinates(p0)
            d = basis.coordinates(u - p0)
            t_cur, last, same_t = 0.0, -1, 0
            continue
        t_cur = t_min
        basis.swap(k)
        crossings += 1
        last = k
        c = basis.coordinates(p0)
        d = basis.coordinates(u - p0)
        pi, lam = primal_at(t_cur, c, d)
        walk.append(float(np.linalg.norm(u - pi)))
        rec.record(crossings, (pi + v) / sq, lam)
    saturated = [j for j in range(m) if j not in basis.hinges]
    if not converged_walk:
        pi, lam = primal_at(t_cur, c, d)
        trace = rec.finish((pi + v) / sq, lam, crossings, False, "mpdb", crossings=crossings,
                           walk_distances=walk, start=start, hinges=tuple(sorted(basis.hinges)))
        return trace
    return _finish_exact(rec, signal, cone, saturated, crossings + 1, "mpdb", crossings=crossings,
                         walk_distances=walk, start=start, hinges=tuple(sorted(basis.hinges)),
                         perturbations=perturbations, inverse_rebuilds=basis.rebuilds)


# ---------------------------------------------------------------------------
# Meyer
# ---------------------------------------------------------------------------


def meyer_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
                init="empty") -> SolverTrace:
    """Meyer's hinge algorithm.

    For a hinge set ``J`` the fit is the projection of ``y`` onto
    ``span{beta^j : j in J}`` plus the affine functions, i.e. onto
    ``{x : A_j x = 0, j not in J}``. Its coefficients on ``beta^j`` are
    ``b_j = -(A x)_j``.

    * If some ``b_j < 0`` the hinge with the most negative coefficient is
      removed.
    * Otherwise the fit is interior to its face. If every saturated
      constraint has ``lam_i >= 0`` (equivalently ``(y - x)^T beta^i <= 0``)
      it is optimal; else the constraint with the most negative multiplier
      becomes a hinge.

    ``init`` is ``"empty"``, ``"full"``, ``"pav"`` or an explicit hinge set.
    Visited hinge sets are kept; a repeat raises :class:`StalledSearchError`.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    ctl = ctl or IterControl()
    m = cone.m
    hinges = _hinges_from_init(init, signal, cone, "empty")
    rec = Recorder(signal, cone, ctl)
    visited = set()
    sse_interior = []
    thr = INTERIOR_TOL * rec.scale
    it = 0
    converged = False
    x = signal.y.copy()
    lam = np.zeros(m)
    while True:
        key = frozenset(hinges)
        if key in visited:
            raise StalledSearchError("Meyer revisited a hinge set", state={"hinges": sorted(hinges), "iteration": it})
        visited.add(key)
        saturated = [j for j in range(m) if j not in hinges]
        x, lam = project_equality(signal, cone, saturated, method="auto")
        rec.record(it, x, np.maximum(lam, 0.0))
        coef = -cone.apply(x)
        hin = np.array(sorted(hinges), dtype=int)
        it += 1
        if hin.size and coef[hin].min() < -thr:
            worst = hin[np.argmin(coef[hin])]
            hinges.discard(int(worst))
        else:
            r = signal.y - x
            sse_interior.append(float(np.dot(signal.w, r * r)))
            sat = np.array(saturated, dtype=int)
            if sat.size == 0 or lam[sat].min() >= -thr:
                converged = True
                break
            worst = sat[np.argmin(lam[sat])]
            hinges.add(int(worst))
        if it >= ctl.max_iterations or rec.out_of_time():
            break
    saturated = [j for j in range(m) if j not in hinges]
    if not converged:
        return rec.finish(x, np.maximum(lam, 0.0), it, False, "meyer", hinges=tuple(sorted(hinges)),
                          interior_sse=sse_interior, visited=len(visited))
    return _finish_exact(rec, signal, cone, saturated, it, "meyer", hinges=tuple(sorted(hinges)),
                         interior_sse=sse_interior, visited=len(visited))


# ---------------------------------------------------------------------------
# Critical index
# ---------------------------------------------------------------------------


def _positive_violations(r, G, live, tol):
    g = r @ G[:, live]
    return [live[i] for i in np.flatnonzero(g > tol)], g


def critical_index_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None
                         ) -> SolverTrace:
    """Nearest point to ``u`` in ``pos(gamma^1..gamma^n)`` by critical-index deflation.

    Solves ``min_{d >= 0} ||u - D d||`` with ``D`` the polar edges plus the
    completion vectors. A sub-routine improves a current point ``xbar`` by
    two-vector distance reductions and, when none applies, by line-search
    and projection steps onto a projection face. At any ``xbar`` with
    ``xbar^T (u - xbar) = 0``, if exactly one edge has
    ``(u - xbar)^T gamma^j > 0`` then ``j`` has a positive coefficient at the
    optimum (a critical index): the problem is deflated by projecting ``u``
    and the remaining edges onto the orthogonal complement of ``gamma^j``.

    The critical indices found, together with the final support, give the
    saturated set; the returned fit is ``y - D d`` recomputed exactly by
    :func:`~coneregress.geometry.project_equality`.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    ctl = ctl or IterControl()
    sq, ys, cs = _whiten(signal, cone)
    m, n = cone.m, cone.n
    G = np.array(cs.gamma)  # deflated in place
    comp = G[:, m:].copy()
    v = comp @ (comp.T @ ys)
    ubar = ys - v
    unorm = max(float(np.linalg.norm(ubar)), 1e-300)
    rec = Recorder(signal, cone, ctl)
    live = list(range(n))
    critical: list[int] = []
    deflated_part = np.zeros(n)
    steps = 0
    stall_cap = 4 * n + 10
    tol = 1e-12 * unorm

    def emit(xbar, support, coefs):
        polar = xbar + deflated_part
        lam = np.zeros(m)
        for i, dval in zip(support, coefs):
            if i < m:
                lam[i] = max(dval, 0.0)
        rec.record(steps, (ys - polar) / sq, lam)

    emit(np.zeros(n), [], [])
    optimum_support: list[int] = []
    finished = False
    timed_out = False
    while not finished:
        # critical-index routine on (G[:, live], ubar)
        norms = np.linalg.norm(G[:, live], axis=0)
        proj = ubar @ G[:, live]
        good = proj > tol * norms
        if not np.any(good):
            finished = True
            optimum_support = []
            break
        score = np.where(good, proj / np.where(norms > 0, norms, 1.0), -np.inf)
        i0 = live[int(np.argmax(score))]
        g0 = G[:, i0]
        S = [i0]
        coefs = np.array([float(ubar @ g0) / float(g0 @ g0)])
        xbar = coefs[0] * g0
        pinv = TrackedPinv(G[:, [i0]])
        pinv_stale = False
        found = None
        inner = 0
        while True:
            steps += 1
            inner += 1
            if inner > stall_cap:
                raise StalledSearchError(
                    "critical-index search did not reach a projection face",
                    state={"support": S, "critical": critical, "coefs": coefs.tolist()},
                )
            if steps >= ctl.max_iterations or rec.out_of_time():
                timed_out = True
                break
            emit(xbar, S, coefs)
            r = ubar - xbar
            P, _ = _positive_violations(r, G, live, tol * 10)
            P = [j for j in P if j not in S] + [j for j in P if j in S]
            if not P:
                finished = True
                optimum_support = S
                break
            if len(P) == 1:
                found = P[0]
                break
            # two-vector distance reduction
            reduced = False
            dist = float(np.linalg.norm(r))
            for j in P:
                if j in S:
                    continue
                g = G[:, j]
                gg = float(g @ g)
                ug = float(ubar @ g)
                edge_dist = math.sqrt(max(float(ubar @ ubar) - ug * ug / gg, 0.0)) if ug > 0 else float(np.linalg.norm(ubar))
                M2 = np.column_stack([xbar, g])
                gram = M2.T @ M2
                indep = abs(np.linalg.det(gram)) > 1e-12 * float(xbar @ xbar) * gg
                if (dist <= edge_dist and indep) or ug <= 0:
                    if not indep:
                        continue
                    ab = np.linalg.solve(gram, M2.T @ ubar)
                    if ab[0] > 0 and ab[1] > 0:
                        coefs = np.append(coefs * ab[0], ab[1])
                        S = S + [j]
                        xbar = ab[0] * xbar + ab[1] * g
                        if pinv_stale:
                            pinv = TrackedPinv(G[:, S])
                            pinv_stale = False
                        else:
                            pinv.append_column(g)
                        reduced = True
                        break
            if reduced:
                continue
            # line search and projection onto a projection face
            j = max((jj for jj in P if jj not in S), key=lambda jj: float(r @ G[:, jj]) / np.linalg.norm(G[:, jj]),
                    default=None)
            if j is not None:
                S = S + [j]
                coefs = np.append(coefs, 0.0)
                if pinv_stale:
                    pinv = TrackedPinv(G[:, S])
                    pinv_stale = False
                else:
                    pinv.append_column(G[:, j])
            for _ in range(len(S) + 1):
                target = pinv.pinv @ ubar
                if target.min() > 0:
                    coefs = target
                    xbar = G[:, S] @ coefs
                    break
                neg = target <= 0
                with np.errstate(divide="ignore", invalid="ignore"):
                    ratios = np.where(neg, coefs / (coefs - target), np.inf)
                tstep = float(ratios.min())
                coefs = coefs + tstep * (target - coefs)
                drop = [q for q in range(len(S)) if coefs[q] <= TIE_TOL * max(1.0, np.abs(coefs).max()) or ratios[q] <= tstep + TIE_TOL]
                if not drop:
                    drop = [int(np.argmin(ratios))]
                keep = [q for q in range(len(S)) if q not in drop]
                S = [S[q] for q in keep]
                coefs = coefs[keep]
                if not S:
                    xbar = np.zeros(n)
                    break
                pinv = TrackedPinv(G[:, S])
                xbar = G[:, S] @ coefs
            else:
                raise StalledSearchError("line search kept dropping edges", state={"support": S, "critical": critical})
            if not S:
                # restart from the closest edge of the current problem
                break
        if timed_out or finished:
            break
        if found is None:
            continue
        # deflate on the critical index
        critical.append(found)
        g = G[:, found].copy()
        q = g / np.linalg.norm(g)
        deflated_part += q * float(q @ ubar)
        ubar = ubar - q * float(q @ ubar)
        live.remove(found)
        G[:, live] -= np.outer(q, q @ G[:, live])
        G[:, found] = 0.0
        if not live:
            finished = True
        unorm = max(float(np.linalg.norm(ubar)), 1e-300)
    crit_all = sorted(set(critical) | set(optimum_support))
    info = dict(critical=tuple(critical), support=tuple(sorted(optimum_support)), deflations=len(critical))
    if timed_out:
        lam = np.zeros(m)
        return rec.finish(signal.y.copy(), lam, steps, False, "critical_index", **info)
    saturated = [i for i in crit_all if i < m]
    return _finish_exact(rec, signal, cone, saturated, steps + 1, "critical_index", **info)


# ---------------------------------------------------------------------------
# Block active-set method
# ---------------------------------------------------------------------------


@dataclass
class BlockPartition:
    """Consecutive blocks induced by a set of knots (non-saturated constraints).

    A knot at constraint ``j`` places a kink at point ``j + 1``. Block ``b``
    covers points ``blocks[b] = (first, last)`` inclusive; the kink point is
    the last point of the block on its left. Block ``b`` is fitted by the
    line ``intercept[b] + slope[b] * (z - center[b])``; ``mu[b]`` is the
    multiplier of the continuity condition between blocks ``b`` and ``b+1``.
    """

    knots: tuple
    blocks: list
    intercept: np.ndarray = None
    slope: np.ndarray = None
    center: np.ndarray = None
    mu: np.ndarray = None

    @property
    def k(self) -> int:
        return len(self.blocks)

    @classmethod
    def from_knots(cls, knots: Sequence[int], n: int) -> "BlockPartition":
        kinks = [int(j) + 1 for j in sorted(set(knots))]
        blocks, first = [], 0
        for q in kinks:
            blocks.append((first, q))
            first = q + 1
        blocks.append((first, n - 1))
        return cls(tuple(sorted(set(int(j) for j in knots))), blocks)

    def evaluate(self, z) -> np.ndarray:
        x = np.empty(len(z))
        for b, (f, l) in enumerate(self.blocks):
            x[f:l + 1] = self.intercept[b] + self.slope[b] * (z[f:l + 1] - self.center[b])
        return x


def solve_block_system(signal: Signal, knots: Sequence[int]):
    """Fit a continuous piecewise-linear function with kinks at the given knots.

    Unknowns are the intercept and slope of each of the ``k`` blocks and the
    ``k - 1`` continuity multipliers, so the KKT system has size ``3k - 1``:

    * per block: weighted normal equations of the line, coupled to the
      neighbouring continuity multipliers;
    * per kink: the two adjacent lines agree at the kink abscissa.

    Returns ``(x, partition)``.
    """
    z, y, w = signal.z, signal.y, signal.w
    part = BlockPartition.from_knots(knots, signal.n)
    k = part.k
    size = 3 * k - 1
    M = np.zeros((size, size))
    rhs = np.zeros(size)
    centers = np.empty(k)
    for b, (f, l) in enumerate(part.blocks):
        zb, yb, wb = z[f:l + 1], y[f:l + 1], w[f:l + 1]
        c = float(np.dot(wb, zb) / wb.sum())
        centers[b] = c
        dz = zb - c
        ia, is_ = 2 * b, 2 * b + 1
        M[ia, ia] = wb.sum()
        M[ia, is_] = M[is_, ia] = float(np.dot(wb, dz))
        M[is_, is_] = float(np.dot(wb, dz * dz))
        rhs[ia] = float(np.dot(wb, yb))
        rhs[is_] = float(np.dot(wb, yb * dz))
    for b in range(k - 1):
        q = part.blocks[b][1]
        zq = z[q]
        row = 2 * k + b
        # continuity: line_{b+1}(zq) - line_b(zq) = 0
        coeffs = {2 * b: -1.0, 2 * b + 1: -(zq - centers[b]), 2 * (b + 1): 1.0, 2 * (b + 1) + 1: zq - centers[b + 1]}
        for col, val in coeffs.items():
            M[row, col] = val
            M[col, row] = val  # multiplier term in the stationarity rows
    try:
        sol = np.linalg.solve(M, rhs)
    except np.linalg.LinAlgError as exc:
        raise SingularBlockSystemError(f"block system singular for knots {part.knots}", knots=part.knots) from exc
    if not np.all(np.isfinite(sol)):
        raise SingularBlockSystemError(f"block system singular for knots {part.knots}", knots=part.knots)
    part.intercept = sol[0:2 * k:2].copy()
    part.slope = sol[1:2 * k:2].copy()
    part.center = centers
    part.mu = sol[2 * k:].copy()
    return part.evaluate(z), part


def _block_identities(signal: Signal, cone: ConeSystem, x, knots) -> float:
    """Largest violation of the aggregate identities and within-block linearity."""
    r = signal.w * (signal.y - x)
    scale = max(1.0, float(np.abs(signal.y).max()) * signal.n)
    zc = signal.z - signal.z.mean()
    agg = max(abs(float(r.sum())), abs(float(np.dot(zc, r)))) / scale
    Ax = cone.apply(x)
    inside = np.ones(cone.m, dtype=bool)
    inside[list(knots)] = False
    lin = float(np.abs(Ax[inside]).max(initial=0.0)) / max(1.0, float(np.abs(signal.y).max()))
    return max(agg, lin)


def block_active_set_solve(signal: Signal, cone: ConeSystem | None = None, ctl: IterControl | None = None,
                           init=None) -> SolverTrace:
    """Primal-feasible active-set method over block partitions.

    The iterate is always concave and piecewise linear with kinks at the
    current knots. Each step either adds the saturated constraint with the
    most negative multiplier as a new knot, or, when the new fit would
    violate concavity at a knot, moves as far as feasibility allows and
    removes the first knot that becomes flat. The fit for a given knot set
    comes from :func:`solve_block_system`.

    ``init`` is an :class:`ActiveSet` of *saturated* constraints, the string
    ``"pav"``, or ``None`` for a single block (the affine fit). Identities
    checked after every step are stored in ``info["identity_residuals"]``.
    """
    cone = cone if cone is not None else build_cone_system(signal)
    ctl = ctl or IterControl()
    m = cone.m
    rec = Recorder(signal, cone, ctl)
    thr_lam = 1e-9 * rec.scale
    if init is None:
        knots: set = set()
    elif isinstance(init, str):
        if init != "pav":
            raise ValueError(f"unknown init {init!r}")
        _, saturated = pav_warm_start(signal, cone)
        knots = set(range(m)) - set(saturated)
    else:
        sat = set(init.indices) if isinstance(init, ActiveSet) else set(ActiveSet.of(init, m).indices)
        knots = set(range(m)) - sat
    # make the starting partition feasible by dropping kinks that bend upward
    x, part = solve_block_system(signal, sorted(knots))
    while knots:
        Ax = cone.apply(x)
        kn = sorted(knots)
        worst = kn[int(np.argmax(Ax[kn]))]
        if Ax[worst] <= 0:
            break
        knots.discard(worst)
        x, part = solve_block_system(signal, sorted(knots))
    identities = []
    it = 0
    converged = False
    lam = np.zeros(m)
    while True:
        identities.append(_block_identities(signal, cone, x, knots))
        saturated = [j for j in range(m) if j not in knots]
        lam = recover_multipliers(signal, cone, x, saturated) if saturated else np.zeros(m)
        rec.record(it, x, np.maximum(lam, 0.0))
        if not saturated or lam[saturated].min() >= -thr_lam:
            converged = True
            break
        if it >= ctl.max_iterations or rec.out_of_time():
            break
        sat = np.array(saturated)
        knots.add(int(sat[np.argmin(lam[sat])]))
        it += 1
        while True:
            x_new, part_new = solve_block_system(signal, sorted(knots))
            Ax_new = cone.apply(x_new)
            kn = np.array(sorted(knots))
            bad = kn[Ax_new[kn] > 0]
            if bad.size == 0:
                x, part = x_new, part_new
                break
            Ax = cone.apply(x)
            ratios = -Ax[bad] / (Ax_new[bad] - Ax[bad])
            t = float(max(0.0, ratios.min()))
            hit = int(bad[np.flatnonzero(ratios <= ratios.min() + TIE_TOL)[0]])
            x = x + t * (x_new - x)
            knots.discard(hit)
            identities.append(_block_identities(signal, cone, x, knots))
    info = dict(knots=tuple(sorted(knots)), blocks=part.k, partition=part, identity_residuals=identities)
    cert_lam = np.where(lam > 0.0, lam, 0.0) if converged else np.maximum(lam, 0.0)
    trace = rec.finish(x, cert_lam, it, converged, "block", **info)
    if converged:
        if rec.reference is None:
            trace.result.converged = trace.result.certificate.passes(rec.ctl.stop_tolerance)
        else:
            trace.result.converged = _close_to_reference(rec, x)
    return trace
