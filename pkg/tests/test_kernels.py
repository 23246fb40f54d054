import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from coneregress import (
    BandedSPD,
    NotPositiveDefiniteError,
    RankDeficientError,
    SingularUpdateError,
    TrackedInverse,
    TrackedPinv,
    banded_spd_solve,
    cholesky_pinv,
    pinv_append_column,
    qr_restricted_solve,
    sherman_morrison_update,
)
from coneregress.kernels import dense_to_upper_bands


def penrose(A, P):
    AP, PA = A @ P, P @ A
    return max(np.abs(AP @ A - A).max(), np.abs(PA @ P - P).max(),
               np.abs(AP - AP.T).max(), np.abs(PA - PA.T).max())


def random_banded_spd(rng, n):
    M = np.zeros((n, n))
    for k in (1, 2):
        off = rng.uniform(-1, 1, n - k)
        M += np.diag(off, k) + np.diag(off, -k)
    M += np.diag(np.abs(M).sum(axis=1) + rng.uniform(0.5, 2.0, n))  # diagonally dominant
    return M


class TestShermanMorrison:
    def test_identity_update(self):
        inv = sherman_morrison_update(TrackedInverse(np.eye(2)), [1.0, 0.0], [0.0, 1.0])
        np.testing.assert_allclose(inv.inverse, [[1.0, -1.0], [0.0, 1.0]])

    def test_singular_update(self):
        with pytest.raises(SingularUpdateError, match="recompute"):
            sherman_morrison_update(TrackedInverse(np.eye(2)), [1.0, 0.0], [-1.0, 0.0])

    def test_random_update_matches_inverse(self, rng):
        A = rng.standard_normal((5, 5)) + 5 * np.eye(5)
        u, v = rng.standard_normal(5), rng.standard_normal(5)
        inv = sherman_morrison_update(TrackedInverse(A), u, v)
        np.testing.assert_allclose(inv.inverse, np.linalg.inv(A + np.outer(u, v)), atol=1e-10)

    @pytest.mark.parametrize("period", [1, 5, 150])
    def test_refresh_period(self, rng, period):
        t = TrackedInverse(np.eye(4), refresh_period=period)
        for _ in range(2 * period + 1):
            t.replace_column(int(rng.integers(4)), rng.standard_normal(4) + 3 * np.eye(4)[int(rng.integers(4))])
            assert t.update_count < period
        assert t.refreshes >= 2

    def test_replace_column(self, rng):
        A = rng.standard_normal((4, 4)) + 4 * np.eye(4)
        col = rng.standard_normal(4) + 4 * np.eye(4)[2]
        t = TrackedInverse(A).replace_column(2, col)
        B = A.copy()
        B[:, 2] = col
        np.testing.assert_allclose(t.inverse, np.linalg.inv(B), atol=1e-10)
        assert t.audit() <= 1e-10

    def test_invalid_period(self):
        with pytest.raises(ValueError):
            TrackedInverse(np.eye(2), refresh_period=0)


class TestPinvAppend:
    def test_orthonormal(self):
        p = pinv_append_column(TrackedPinv(np.array([[1.0], [0.0]])), [0.0, 1.0])
        np.testing.assert_allclose(p.pinv, np.eye(2), atol=1e-15)

    def test_matches_svd(self):
        p = pinv_append_column(TrackedPinv(np.array([[1.0], [1.0]])), [1.0, 0.0])
        np.testing.assert_allclose(p.pinv, np.linalg.pinv(np.array([[1.0, 1.0], [1.0, 0.0]])), atol=1e-12)

    def test_dependent_column(self):
        with pytest.raises(RankDeficientError):
            pinv_append_column(TrackedPinv(np.array([[1.0], [1.0]])), [2.0, 2.0])

    def test_row_mismatch(self):
        with pytest.raises(ValueError):
            TrackedPinv(n_rows=3).append_column([1.0, 2.0])

    def test_from_empty_and_remove(self, rng):
        p = TrackedPinv(n_rows=8)
        cols = rng.standard_normal((8, 5))
        for c in cols.T:
            p.append_column(c)
        np.testing.assert_allclose(p.pinv, np.linalg.pinv(cols), atol=1e-10)
        p.remove_column(1)
        np.testing.assert_allclose(p.pinv, np.linalg.pinv(np.delete(cols, 1, axis=1)), atol=1e-10)
        assert p.penrose_residual() <= 1e-10

    @given(st.integers(0, 2**32 - 1), st.integers(1, 12))
    def test_chain(self, seed, k):
        rng = np.random.default_rng(seed)
        cols = rng.standard_normal((20, k))
        p = TrackedPinv(n_rows=20)
        for c in cols.T:
            p.append_column(c)
        np.testing.assert_allclose(p.pinv, np.linalg.pinv(cols), atol=1e-8)
        assert penrose(cols, p.pinv) <= 1e-8


class TestQrRestricted:
    def test_unit_column(self):
        y = np.array([3.0, -1.0, 2.0])
        np.testing.assert_allclose(qr_restricted_solve(np.array([1.0, 0.0, 0.0]), y), [3.0, 0.0, 0.0])

    def test_second_difference(self):
        out, coef = qr_restricted_solve(np.array([1.0, -2.0, 1.0]), np.array([0.0, -1.0, 0.0]), return_coef=True)
        np.testing.assert_allclose(out, np.array([1.0, -2.0, 1.0]) / 3, atol=1e-15)
        np.testing.assert_allclose(coef, [1 / 3])

    def test_matches_normal_equations(self, rng):
        At = rng.standard_normal((10, 6))
        y = rng.standard_normal(10)
        ref = At @ np.linalg.solve(At.T @ At, At.T @ y)
        out = qr_restricted_solve(At, y)
        np.testing.assert_allclose(out, ref, atol=1e-9)
        # output lies in range(A^T)
        resid = out - At @ np.linalg.lstsq(At, out, rcond=None)[0]
        assert np.abs(resid).max() <= 1e-10

    def test_ill_conditioned_accuracy(self):
        # columns nearly parallel: normal equations lose ~cond^2 digits, QR keeps ~cond
        At = np.array([[1.0, 1.0], [0.0, 1e-7], [0.0, 0.0]])
        y = np.array([1.0, 1.0, 1.0])
        np.testing.assert_allclose(qr_restricted_solve(At, y), [1.0, 1.0, 0.0], atol=1e-8)

    def test_rank_deficient(self):
        with pytest.raises(RankDeficientError):
            qr_restricted_solve(np.array([[1.0, 2.0], [1.0, 2.0], [0.0, 0.0]]), np.ones(3))


class TestCholeskyPinv:
    def test_diagonal(self):
        np.testing.assert_allclose(cholesky_pinv(np.diag([2.0, 0.0])), np.diag([0.5, 0.0]))

    def test_row_vector(self):
        a = np.array([[1.0, -2.0, 1.0]])
        np.testing.assert_allclose(cholesky_pinv(a), a.T / 6, atol=1e-15)

    def test_zero(self):
        np.testing.assert_array_equal(cholesky_pinv(np.zeros((3, 2))), np.zeros((2, 3)))

    @pytest.mark.parametrize("shape", [(5, 4), (4, 5), (8, 3)])
    def test_rank_deficient_matches_svd(self, rng, shape):
        r = min(shape) - 1
        A = rng.standard_normal((shape[0], r)) @ rng.standard_normal((r, shape[1]))
        P = cholesky_pinv(A)
        np.testing.assert_allclose(P, np.linalg.pinv(A), atol=1e-8)
        assert penrose(A, P) <= 1e-8


class TestBandedSolve:
    def test_scaled_identity(self):
        np.testing.assert_allclose(banded_spd_solve(2 * np.eye(6), np.full(6, 2.0)), np.ones(6))

    def test_admm_system(self):
        A = np.array([[1.0, -2.0, 1.0]])
        M = 2 * np.eye(3) + A.T @ A
        b = np.array([0.0, 1.0, 0.0])
        np.testing.assert_allclose(banded_spd_solve(M, b), np.linalg.solve(M, b), atol=1e-14)

    @pytest.mark.parametrize("n", [3, 10, 1000])
    def test_random(self, rng, n):
        M = random_banded_spd(rng, n)
        b = rng.standard_normal(n)
        x = banded_spd_solve(M, b)
        ref = np.linalg.solve(M, b)
        assert np.abs(x - ref).max() <= 1e-9 * np.abs(ref).max()
        assert np.abs(M @ x - b).max() <= 1e-10 * np.abs(b).max()

    def test_cached_factor(self, rng):
        M = random_banded_spd(rng, 50)
        s = BandedSPD.from_dense(M)
        for _ in range(3):
            b = rng.standard_normal(50)
            np.testing.assert_allclose(s.solve(b), np.linalg.solve(M, b), atol=1e-10)

    def test_not_spd(self):
        with pytest.raises(NotPositiveDefiniteError):
            banded_spd_solve(np.diag([1.0, -1.0, 1.0]), np.ones(3))

    def test_bandwidth_checked(self):
        with pytest.raises(ValueError):
            dense_to_upper_bands(np.ones((4, 4)))

    def test_band_storage_input(self, rng):
        M = random_banded_spd(rng, 7)
        b = rng.standard_normal(7)
        np.testing.assert_allclose(banded_spd_solve(dense_to_upper_bands(M), b, bands=True),
                                   np.linalg.solve(M, b), atol=1e-12)
