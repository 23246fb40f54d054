"""Concave-regression cone geometry.

The feasible set is the polyhedral cone ``K = {x : A x <= 0}`` where row ``i``
of ``A`` is the second divided difference at ``z[i + 1]``. All indices in this
package are 0-based: constraint ``i`` couples points ``i, i+1, i+2``.

Projections use the weighted metric ``||x||_W^2 = sum(w * x**2)`` and the
multiplier convention ``x = y - W^{-1} A^T lam`` (stationarity of
``0.5 ||x - y||_W^2 + lam^T A x``).
"""
from __future__ import annotations

from dataclasses import dataclass, field
from functools import cached_property
from typing import NamedTuple, Sequence

import numpy as np
from scipy.optimize import nnls

from .errors import InvalidSignalError, NotPositiveDefiniteError, RankDeficientError
from .kernels import BandedSPD, qr_restricted_solve

__all__ = [
    "Signal",
    "ConeSystem",
    "KktCertificate",
    "MoreauSplit",
    "build_cone_system",
    "project_equality",
    "kkt_certificate",
    "moreau_split",
    "recover_multipliers",
    "weighted_sse",
]

KKT_TOL = 1e-8


@dataclass(frozen=True, eq=False)
class Signal:
    """Regression input: abscissae ``z``, observations ``y``, weights ``w``."""

    z: np.ndarray
    y: np.ndarray
    w: np.ndarray = field(default=None)

    def __post_init__(self):
        z = np.array(self.z, dtype=float, copy=True)
        y = np.array(self.y, dtype=float, copy=True)
        w = np.ones_like(y) if self.w is None else np.array(self.w, dtype=float, copy=True)
        if z.ndim != 1 or y.ndim != 1 or w.ndim != 1:
            raise InvalidSignalError("z, y and w must be one-dimensional")
        if not (len(z) == len(y) == len(w)):
            raise InvalidSignalError(
                f"length mismatch: len(z)={len(z)}, len(y)={len(y)}, len(w)={len(w)}"
            )
        if not (np.all(np.isfinite(z)) and np.all(np.isfinite(y)) and np.all(np.isfinite(w))):
            raise InvalidSignalError("signal contains non-finite values")
        if np.any(np.diff(z) <= 0):
            raise InvalidSignalError(
                "z must be strictly increasing; aggregate replicates into weights"
            )
        if np.any(w <= 0):
            raise InvalidSignalError("weights must be positive")
        for arr in (z, y, w):
            arr.flags.writeable = False
        object.__setattr__(self, "z", z)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "w", w)

    @classmethod
    def from_values(cls, y, z=None, w=None) -> "Signal":
        """Build a signal with ``z = 1..n`` when no abscissae are given."""
        y = np.asarray(y, dtype=float)
        if z is None:
            z = np.arange(1, len(y) + 1, dtype=float)
        return cls(z=z, y=y, w=w)

    @property
    def n(self) -> int:
        return len(self.y)

    def with_values(self, y) -> "Signal":
        return Signal(z=self.z, y=y, w=self.w)


def _second_difference_bands(z: np.ndarray) -> np.ndarray:
    d1 = z[1:-1] - z[:-2]
    d2 = z[2:] - z[1:-1]
    return np.column_stack([1.0 / d1, -(1.0 / d1 + 1.0 / d2), 1.0 / d2])


def _orthonormal_completion(z: np.ndarray, sqrt_w: np.ndarray) -> np.ndarray:
    """Orthonormal basis of ``span(sqrt_w * 1, sqrt_w * z)`` (the affine functions)."""
    g1 = sqrt_w / np.linalg.norm(sqrt_w)
    g2 = sqrt_w * (z - np.dot(g1, sqrt_w * z) / np.dot(g1, sqrt_w))
    g2 = g2 - np.dot(g2, g1) * g1
    g2 /= np.linalg.norm(g2)
    return np.column_stack([g1, g2])


@dataclass(frozen=True, eq=False)
class ConeSystem:
    """Constraint matrix of the concavity cone with its polar edges and dual basis.

    ``bands[i]`` holds the three nonzero coefficients of row ``i`` of ``A``
    (columns ``i, i+1, i+2``). ``gamma`` is the ``n x n`` matrix whose columns
    are the polar-cone edges ``A[i]`` followed by two orthonormal vectors
    spanning the affine functions; ``beta`` is the dual basis with
    ``beta.T @ gamma == -I``.
    """

    z: np.ndarray
    weights: np.ndarray
    bands: np.ndarray
    completion: np.ndarray
    row_scale: np.ndarray

    @property
    def n(self) -> int:
        return len(self.z)

    @property
    def m(self) -> int:
        return self.n - 2

    @cached_property
    def A(self) -> np.ndarray:
        m, n = self.m, self.n
        A = np.zeros((m, n))
        rows = np.arange(m)
        for k in range(3):
            A[rows, rows + k] = self.bands[:, k]
        A.flags.writeable = False
        return A

    @cached_property
    def gamma(self) -> np.ndarray:
        C = np.hstack([self.A.T, self.completion])
        C.flags.writeable = False
        return C

    @cached_property
    def beta(self) -> np.ndarray:
        B = -np.linalg.inv(self.gamma).T
        B.flags.writeable = False
        return B

    @cached_property
    def winv(self) -> np.ndarray:
        return 1.0 / self.weights

    def apply(self, x: np.ndarray) -> np.ndarray:
        """Return ``A @ x`` in O(n)."""
        b = self.bands
        return b[:, 0] * x[:-2] + b[:, 1] * x[1:-1] + b[:, 2] * x[2:]

    def apply_transpose(self, lam: np.ndarray) -> np.ndarray:
        """Return ``A.T @ lam`` in O(n)."""
        out = np.zeros(self.n)
        b = self.bands
        out[:-2] += b[:, 0] * lam
        out[1:-1] += b[:, 1] * lam
        out[2:] += b[:, 2] * lam
        return out

    def gram_bands(self, active=None) -> np.ndarray:
        """Upper banded storage of ``A_J W^{-1} A_J^T`` (half-bandwidth 2)."""
        b, wi = self.bands, self.winv
        m = self.m
        d0 = b[:, 0] ** 2 * wi[:-2] + b[:, 1] ** 2 * wi[1:-1] + b[:, 2] ** 2 * wi[2:]
        d1 = b[:-1, 1] * b[1:, 0] * wi[1:-2] + b[:-1, 2] * b[1:, 1] * wi[2:-1]
        d2 = b[:-2, 2] * b[2:, 0] * wi[2:-2]
        if active is None:
            J = np.arange(m)
        else:
            J = np.asarray(active, dtype=int)
        r = len(J)
        ab = np.zeros((3, r))
        ab[2] = d0[J]
        if r > 1:
            gap = J[1:] - J[:-1]
            vals = np.zeros(r - 1)
            one = gap == 1
            two = gap == 2
            vals[one] = d1[J[:-1][one]]
            vals[two] = d2[J[:-1][two]]
            ab[1, 1:] = vals
        if r > 2:
            gap2 = J[2:] - J[:-2]
            vals = np.where(gap2 == 2, d2[np.minimum(J[:-2], max(m - 3, 0))], 0.0)
            ab[0, 2:] = vals
        return ab

    def whitened(self) -> "ConeSystem":
        """Unit-weight system in coordinates ``x_s = sqrt(w) * x``.

        Constraint rows become ``A W^{-1/2}``; multipliers are unchanged by the
        change of variables, so solutions map back with ``x = x_s / sqrt(w)``.
        """
        if np.all(self.weights == 1.0):
            return self
        s = np.sqrt(self.weights)
        bands = self.bands / np.column_stack([s[:-2], s[1:-1], s[2:]])
        return ConeSystem(
            z=self.z,
            weights=np.ones(self.n),
            bands=bands,
            completion=_orthonormal_completion(self.z, s),
            row_scale=self.row_scale,
        )


def build_cone_system(signal: Signal, normalize_rows: bool = False) -> ConeSystem:
    """Assemble the concavity constraints for ``signal``.

    Parameters
    ----------
    signal : Signal
        Needs ``n >= 3``.
    normalize_rows : bool
        Scale every constraint row to unit Euclidean norm. Multipliers are then
        expressed with respect to the scaled rows.
    """
    if signal.n < 3:
        raise InvalidSignalError(f"need at least 3 points for a concavity constraint, got {signal.n}")
    bands = _second_difference_bands(signal.z)
    if normalize_rows:
        row_scale = np.linalg.norm(bands, axis=1)
        bands = bands / row_scale[:, None]
    else:
        row_scale = np.ones(len(bands))
    return ConeSystem(
        z=signal.z,
        weights=signal.w,
        bands=bands,
        completion=_orthonormal_completion(signal.z, np.ones(signal.n)),
        row_scale=row_scale,
    )


def weighted_sse(signal: Signal, x: np.ndarray) -> float:
    r = np.asarray(x) - signal.y
    return float(np.dot(signal.w, r * r))


def _as_index_array(active, m: int) -> np.ndarray:
    J = np.unique(np.asarray(list(active) if not isinstance(active, np.ndarray) else active, dtype=int))
    if J.size and (J[0] < 0 or J[-1] >= m):
        raise IndexError(f"active indices must lie in [0, {m}), got {J.tolist()}")
    return J


def project_equality(signal: Signal, cone: ConeSystem, active: Sequence[int], method: str = "qr"):
    """Weighted projection of ``y`` onto ``{x : A[J] x = 0}``.

    Returns ``(x, lam)`` where ``lam`` has length ``m`` and is zero off ``J``;
    ``x = y - W^{-1} A^T lam`` holds to rounding.

    ``method="qr"`` uses a thin QR factorization of the whitened rows (never
    forms the normal equations); ``"banded"`` solves the pentadiagonal normal
    equations in O(n); ``"auto"`` picks banded for n > 200.
    """
    J = _as_index_array(active, cone.m)
    y = signal.y
    lam = np.zeros(cone.m)
    if J.size == 0:
        return y.copy(), lam
    if method == "auto":
        method = "banded" if cone.n > 200 else "qr"
    winv = cone.winv
    if method == "qr":
        s = np.sqrt(cone.weights)
        Mt = (cone.A[J] / s).T
        proj, coef = qr_restricted_solve(Mt, s * y, return_coef=True)
        x = (s * y - proj) / s
        lam[J] = coef
    elif method == "banded":
        ab = cone.gram_bands(J)
        try:
            solver = BandedSPD(ab)
        except NotPositiveDefiniteError as exc:  # dependent rows or lost precision
            raise RankDeficientError(f"{J.size} constraint rows are numerically dependent") from exc
        rhs = cone.apply(y)[J]
        lam[J] = solver.solve(rhs)
        x = y - winv * cone.apply_transpose(lam)
    else:
        raise ValueError(f"unknown method {method!r}")
    return _snap_to_face(cone.z, x, J), lam


def _snap_to_face(z: np.ndarray, x: np.ndarray, J: np.ndarray) -> np.ndarray:
    """Re-evaluate each run of saturated constraints as a straight line.

    A run ``a..b`` of consecutive saturated constraints makes points
    ``a..b+2`` collinear; interpolating the interior points from the two ends
    puts ``A[J] x`` at rounding level of ``x`` alone, independent of the
    size of the multipliers.
    """
    if J.size == 0:
        return x
    n = x.shape[0]
    inner = np.zeros(n, dtype=bool)
    inner[J + 1] = True
    idx = np.arange(n)
    # nearest run end to the left and to the right of every point
    left = np.maximum.accumulate(np.where(inner, 0, idx))
    right = np.minimum.accumulate(np.where(inner, n - 1, idx)[::-1])[::-1]
    p, a, b = idx[inner], left[inner], right[inner]
    x[p] = x[a] + (z[p] - z[a]) / (z[b] - z[a]) * (x[b] - x[a])
    return x


def recover_multipliers(signal: Signal, cone: ConeSystem, x: np.ndarray, active=None) -> np.ndarray:
    """Least-squares multipliers for a primal point: ``min ||W(y - x) - A_J^T lam||_{W^{-1}}``.

    Exact whenever ``x`` is the projection onto a face with saturated set ``J``.
    """
    J = np.arange(cone.m) if active is None else _as_index_array(active, cone.m)
    lam = np.zeros(cone.m)
    if J.size == 0:
        return lam
    rhs = cone.apply(signal.y - np.asarray(x, dtype=float))[J]
    lam[J] = BandedSPD(cone.gram_bands(J)).solve(rhs)
    return lam


@dataclass(frozen=True)
class KktCertificate:
    """Optimality residuals of a primal/dual pair.

    ``scale`` is ``max(1, ||y||_inf)``. :meth:`passes` compares every residual
    against ``tol`` (absolute), or against ``tol * scale`` when ``relative``.
    """

    primal_residual: float
    dual_residual: float
    complementarity: float
    stationarity: float
    scale: float = 1.0

    def as_tuple(self):
        return (self.primal_residual, self.dual_residual, self.complementarity, self.stationarity)

    @property
    def worst(self) -> float:
        return max(self.as_tuple())

    def passes(self, tol: float = KKT_TOL, relative: bool = False) -> bool:
        bound = tol * self.scale if relative else tol
        return all(np.isfinite(v) and v <= bound for v in self.as_tuple())


def kkt_certificate(signal: Signal, cone: ConeSystem, x, lam) -> KktCertificate:
    x = np.asarray(x, dtype=float)
    lam = np.asarray(lam, dtype=float)
    Ax = cone.apply(x)
    primal = max(0.0, float(Ax.max())) if Ax.size else 0.0
    dual = max(0.0, float((-lam).max())) if lam.size else 0.0
    comp = float(np.abs(lam * Ax).max()) if lam.size else 0.0
    stat = float(np.abs(x - signal.y + cone.winv * cone.apply_transpose(lam)).max())
    scale = max(1.0, float(np.abs(signal.y).max()))
    return KktCertificate(primal, dual, comp, stat, scale)


class MoreauSplit(NamedTuple):
    x_polar: np.ndarray
    inner: float
    polar_residual: float  # distance of W x_polar from pos(A^T) (nan without a cone)


def moreau_split(y, x_hat, weights=None, cone: ConeSystem | None = None) -> MoreauSplit:
    """Split ``y = x_hat + x_polar`` and measure how well it matches Moreau's theorem.

    ``inner`` is the ``W``-inner product of the two parts. With ``cone``, the
    polar part is tested for membership in the polar cone: ``W x_polar`` must
    be a nonnegative combination of the rows of ``A``; the reported residual is
    the NNLS residual of that fit.
    """
    y = np.asarray(y, dtype=float)
    x_hat = np.asarray(x_hat, dtype=float)
    if y.shape != x_hat.shape:
        raise ValueError("y and x_hat must have the same shape")
    w = np.ones_like(y) if weights is None else np.asarray(weights, dtype=float)
    x_polar = y - x_hat
    inner = float(np.dot(w * x_hat, x_polar))
    residual = float("nan")
    if cone is not None:
        _, residual = nnls(cone.A.T, w * x_polar)
    return MoreauSplit(x_polar, inner, float(residual))
