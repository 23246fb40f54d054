"""Incremental matrix kernels used by the active-set solvers.

Rank-one inverse updates, pseudoinverse column appends, QR-based restricted
solves, a Cholesky-based pseudoinverse and a banded SPD solver.
"""
from __future__ import annotations

import numpy as np
import scipy.linalg as sla

from .errors import NotPositiveDefiniteError, RankDeficientError, SingularUpdateError

__all__ = [
    "RANK_TOL",
    "TrackedInverse",
    "TrackedPinv",
    "sherman_morrison_update",
    "pinv_append_column",
    "qr_restricted_solve",
    "cholesky_pinv",
    "BandedSPD",
    "banded_spd_solve",
    "dense_to_upper_bands",
]

RANK_TOL = 1e-12


class TrackedInverse:
    """Inverse of a square matrix maintained through rank-one updates.

    The tracked matrix itself is kept alongside so the inverse can be
    recomputed from scratch every ``refresh_period`` updates, bounding the
    round-off drift of repeated Sherman-Morrison steps.
    """

    def __init__(self, matrix, refresh_period: int = 150):
        if refresh_period < 1:
            raise ValueError("refresh_period must be >= 1")
        self.matrix = np.array(matrix, dtype=float)
        self.inverse = np.linalg.inv(self.matrix)
        self.update_count = 0
        self.refresh_period = refresh_period
        self.refreshes = 0

    def refresh(self):
        self.inverse = np.linalg.inv(self.matrix)
        self.update_count = 0
        self.refreshes += 1

    def update(self, u, v, tol: float = RANK_TOL) -> "TrackedInverse":
        """Replace the tracked matrix ``M`` by ``M + u v^T`` in place."""
        u = np.asarray(u, dtype=float)
        v = np.asarray(v, dtype=float)
        zc = self.inverse @ u
        denom = 1.0 + v @ zc
        if abs(denom) <= tol:
            raise SingularUpdateError(
                f"Sherman-Morrison denominator {denom:.3e} below {tol:g}; recompute from scratch"
            )
        wr = v @ self.inverse
        self.inverse -= np.outer(zc, wr) / denom
        self.matrix += np.outer(u, v)
        self.update_count += 1
        if self.update_count >= self.refresh_period:
            self.refresh()
        return self

    def replace_column(self, k: int, column, tol: float = RANK_TOL) -> "TrackedInverse":
        e = np.zeros(self.matrix.shape[1])
        e[k] = 1.0
        return self.update(np.asarray(column, dtype=float) - self.matrix[:, k], e, tol=tol)

    def audit(self) -> float:
        """Return ``||M @ inv - I||_inf``."""
        n = self.matrix.shape[0]
        return float(np.abs(self.matrix @ self.inverse - np.eye(n)).max())


def sherman_morrison_update(inv: TrackedInverse, u, v, tol: float = RANK_TOL) -> TrackedInverse:
    return inv.update(u, v, tol=tol)


class TrackedPinv:
    """Pseudoinverse of a matrix grown one column at a time."""

    def __init__(self, matrix=None, n_rows: int | None = None):
        if matrix is None:
            if n_rows is None:
                raise ValueError("give either an initial matrix or n_rows")
            self.matrix = np.zeros((n_rows, 0))
            self.pinv = np.zeros((0, n_rows))
        else:
            self.matrix = np.array(matrix, dtype=float, ndmin=2)
            self.pinv = np.linalg.pinv(self.matrix)

    @property
    def r(self) -> int:
        return self.matrix.shape[1]

    def append_column(self, x, tol: float = RANK_TOL) -> "TrackedPinv":
        x = np.asarray(x, dtype=float).reshape(-1)
        if x.shape[0] != self.matrix.shape[0]:
            raise ValueError(f"column has {x.shape[0]} rows, expected {self.matrix.shape[0]}")
        Ax = self.pinv @ x
        w = x - self.matrix @ Ax
        ww = float(w @ w)
        if ww <= tol * max(1.0, float(x @ x)):
            raise RankDeficientError("appended column lies in the span of the existing columns")
        w_dag = w / ww
        self.pinv = np.vstack([self.pinv - np.outer(Ax, w_dag), w_dag])
        self.matrix = np.column_stack([self.matrix, x])
        return self

    def remove_column(self, k: int) -> "TrackedPinv":
        """Drop column ``k`` and recompute the pseudoinverse via QR."""
        self.matrix = np.delete(self.matrix, k, axis=1)
        if self.r == 0:
            self.pinv = np.zeros((0, self.matrix.shape[0]))
        else:
            Q, R = np.linalg.qr(self.matrix)
            self.pinv = sla.solve_triangular(R, Q.T)
        return self

    def penrose_residual(self) -> float:
        """Largest violation of the four Moore-Penrose conditions."""
        A, P = self.matrix, self.pinv
        AP, PA = A @ P, P @ A
        return float(max(
            np.abs(AP @ A - A).max(initial=0.0),
            np.abs(PA @ P - P).max(initial=0.0),
            np.abs(AP - AP.T).max(initial=0.0),
            np.abs(PA - PA.T).max(initial=0.0),
        ))


def pinv_append_column(p: TrackedPinv, x, tol: float = RANK_TOL) -> TrackedPinv:
    return p.append_column(x, tol=tol)


def qr_restricted_solve(Atr, y, return_coef: bool = False, tol: float = RANK_TOL):
    """Compute ``A^T (A A^T)^{-1} A y`` through a thin QR of ``A^T``.

    ``Atr`` is the ``n x r`` matrix ``A^T`` with full column rank. The result
    is the orthogonal projection of ``y`` onto ``range(A^T)``; with
    ``return_coef`` the coefficients ``(A A^T)^{-1} A y`` are returned too.
    Avoids forming ``A A^T``, which would square the condition number.
    """
    Atr = np.asarray(Atr, dtype=float)
    if Atr.ndim == 1:
        Atr = Atr[:, None]
    y = np.asarray(y, dtype=float)
    Q, R = np.linalg.qr(Atr, mode="reduced")
    diag = np.abs(np.diag(R))
    if diag.size and diag.min() <= tol * max(1.0, diag.max()):
        raise RankDeficientError(
            f"A^T is rank deficient (min |R_ii| = {diag.min():.3e})"
        )
    qty = Q.T @ y
    proj = Q @ qty
    if return_coef:
        coef = sla.solve_triangular(R, qty)
        return proj, coef
    return proj


def cholesky_pinv(G) -> np.ndarray:
    """Moore-Penrose pseudoinverse from a full-rank Cholesky factorization.

    Follows Courrieu's geninv: factor the smaller Gram matrix as ``L L^T`` with
    ``L`` of full column rank, then ``G^+ = L (L^T L)^{-2} L^T G^T`` (or the
    transposed form for wide inputs).
    """
    G = np.asarray(G, dtype=float)
    if G.ndim == 1:
        G = G[None, :]
    rows, cols = G.shape
    transpose = rows < cols
    A = G @ G.T if transpose else G.T @ G
    n = A.shape[0]
    dA = np.diag(A)
    if not np.any(dA > 0):
        return np.zeros((cols, rows))
    tol = dA[dA > 0].min() * 1e-9
    L = np.zeros_like(A)
    r = 0
    for k in range(n):
        L[k:, r] = A[k:, k] - L[k:, :r] @ L[k, :r]
        if L[k, r] > tol:
            L[k, r] = np.sqrt(L[k, r])
            if k < n - 1:
                L[k + 1:, r] /= L[k, r]
            r += 1
        else:
            L[k:, r] = 0.0
    L = L[:, :r]
    M = np.linalg.inv(L.T @ L)
    if transpose:
        return G.T @ L @ M @ M @ L.T
    return L @ M @ M @ L.T @ G.T


def dense_to_upper_bands(M, bandwidth: int = 2) -> np.ndarray:
    """Convert a symmetric banded matrix to LAPACK upper band storage."""
    M = np.asarray(M, dtype=float)
    n = M.shape[0]
    if np.any(np.triu(M, bandwidth + 1) != 0):
        raise ValueError(f"matrix has entries beyond half-bandwidth {bandwidth}")
    ab = np.zeros((bandwidth + 1, n))
    for k in range(bandwidth + 1):
        ab[bandwidth - k, k:] = np.diagonal(M, k)
    return ab


class BandedSPD:
    """Cached Cholesky factor of an SPD matrix with half-bandwidth <= 2.

    ``ab`` is LAPACK upper band storage of shape ``(3, n)``: row 2 is the
    diagonal, row 1 the first superdiagonal (shifted right by one), row 0 the
    second superdiagonal.
    """

    def __init__(self, ab):
        ab = np.asarray(ab, dtype=float)
        if ab.ndim != 2 or ab.shape[0] != 3:
            raise ValueError(f"expected band storage of shape (3, n), got {ab.shape}")
        self.ab = ab
        self.n = ab.shape[1]
        try:
            self.factor = sla.cholesky_banded(ab, lower=False)
        except np.linalg.LinAlgError as exc:
            raise NotPositiveDefiniteError(f"banded matrix is not SPD: {exc}") from exc

    @classmethod
    def from_dense(cls, M) -> "BandedSPD":
        return cls(dense_to_upper_bands(M))

    def solve(self, b) -> np.ndarray:
        return sla.cho_solve_banded((self.factor, False), np.asarray(b, dtype=float))


def banded_spd_solve(matrix, b, bands: bool = False) -> np.ndarray:
    """Solve ``M x = b`` for SPD ``M`` with half-bandwidth <= 2 in O(n).

    ``matrix`` is dense unless ``bands=True``, in which case it is upper band
    storage as accepted by :class:`BandedSPD`.
    """
    solver = BandedSPD(matrix) if bands else BandedSPD.from_dense(matrix)
    return solver.solve(b)
