import numpy as np
import pytest

from hmmfields.exceptions import DimensionMismatch, NotPositiveDefinite
from hmmfields.sparse import (
    BandedSymmetric,
    SparseSymmetric,
    cholesky,
    quad_form,
    solve,
)


def random_spd(n, rng, banded=False, hbw=3):
    """AtA + I construction, optionally band-limited."""
    a = rng.normal(size=(n, n))
    if banded:
        i, j = np.indices((n, n))
        a[np.abs(i - j) > hbw] = 0.0
    m = a.T @ a + np.eye(n)
    if banded:
        i, j = np.indices((n, n))
        m[np.abs(i - j) > 2 * hbw] = 0.0
    return m


class TestCholesky:
    def test_identity(self):
        a = SparseSymmetric.from_dense(np.eye(5))
        f = cholesky(a)
        assert np.allclose(f.factor_dense(), np.eye(5))
        assert f.log_determinant == pytest.approx(0.0, abs=1e-14)

    def test_diagonal(self):
        a = SparseSymmetric.from_dense(np.diag([4.0, 9.0]))
        f = cholesky(a)
        assert np.allclose(sorted(np.diag(f.factor_dense())), [2.0, 3.0])
        assert f.log_determinant == pytest.approx(np.log(36.0), rel=1e-14)

    def test_logdet_matches_eigenvalue_oracle(self):
        rng = np.random.default_rng(0)
        m = random_spd(50, rng)
        logdet_oracle = float(np.sum(np.log(np.linalg.eigvalsh(m))))
        f = cholesky(SparseSymmetric.from_dense(m))
        assert f.log_determinant == pytest.approx(logdet_oracle, rel=1e-10)

    @pytest.mark.parametrize("n", [2, 17, 64, 200])
    def test_reconstruction_roundtrip(self, n):
        rng = np.random.default_rng(n)
        m = random_spd(n, rng, banded=(n % 2 == 0))
        f = cholesky(SparseSymmetric.from_dense(m))
        L = f.factor_dense()
        rec = L @ L.T
        perm = f.perm if f.perm is not None else np.arange(n)
        target = m[perm][:, perm]
        err = np.abs(rec - target).max() / np.abs(m).max()
        assert err <= 1e-10

    def test_not_positive_definite(self):
        m = np.diag([1.0, -2.0, 3.0])
        with pytest.raises(NotPositiveDefinite):
            cholesky(SparseSymmetric.from_dense(m))

    def test_banded_factor_keeps_bandwidth(self):
        rng = np.random.default_rng(7)
        m = random_spd(40, rng, banded=True, hbw=2)
        b = BandedSymmetric.from_dense(m)
        f = cholesky(b)
        assert f.half_bandwidth <= b.half_bandwidth

    def test_banded_not_positive_definite(self):
        b = BandedSymmetric.from_dense(np.diag([1.0, 0.0]))
        with pytest.raises(NotPositiveDefinite):
            cholesky(b)


class TestSolve:
    def test_identity(self):
        f = cholesky(SparseSymmetric.from_dense(np.eye(3)))
        assert np.allclose(solve(f, np.array([1.0, 2.0, 3.0])), [1.0, 2.0, 3.0])

    def test_diagonal(self):
        f = cholesky(SparseSymmetric.from_dense(np.diag([2.0, 2.0])))
        assert np.allclose(solve(f, np.array([4.0, 6.0])), [2.0, 3.0])

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(1)
        m = random_spd(50, rng)
        b = rng.normal(size=50)
        z_oracle = np.linalg.solve(m, b)
        z = solve(cholesky(SparseSymmetric.from_dense(m)), b)
        assert np.abs(z - z_oracle).max() <= 1e-9 * max(1.0, np.abs(z_oracle).max())

    def test_residual_norm(self):
        rng = np.random.default_rng(2)
        m = random_spd(80, rng, banded=True)
        b = rng.normal(size=80)
        z = solve(cholesky(SparseSymmetric.from_dense(m)), b)
        res = np.abs(m @ z - b).max() / np.abs(b).max()
        assert res <= 1e-10

    def test_dimension_mismatch(self):
        f = cholesky(SparseSymmetric.from_dense(np.eye(3)))
        with pytest.raises(DimensionMismatch):
            solve(f, np.ones(4))

    def test_solve_lt_covariance_identity(self):
        # z = solve_lt(eps) must have covariance A^{-1}; check via A z pairs
        rng = np.random.default_rng(3)
        m = random_spd(30, rng)
        f = cholesky(SparseSymmetric.from_dense(m))
        eps = np.eye(30)
        z = np.column_stack([f.solve_lt(eps[:, i]) for i in range(30)])
        # cov(z) = Z Z' with Z = P' L^{-T}; check L' (P z) = eps
        assert np.allclose(z @ z.T, np.linalg.inv(m), atol=1e-8)


class TestQuadForm:
    def test_identity(self):
        a = SparseSymmetric.from_dense(np.eye(2))
        assert quad_form(a, np.array([3.0, 4.0])) == pytest.approx(25.0)

    def test_zero_matrix(self):
        a = SparseSymmetric(3, [], [], [])
        assert quad_form(a, np.ones(3)) == 0.0

    def test_matches_dense_oracle(self):
        rng = np.random.default_rng(4)
        m = random_spd(30, rng, banded=True)
        a = SparseSymmetric.from_dense(m)
        for _ in range(5):
            v = rng.normal(size=30)
            oracle = float(v @ m @ v)
            assert quad_form(a, v) == pytest.approx(oracle, rel=1e-12)

    def test_psd_nonnegative(self):
        rng = np.random.default_rng(5)
        g = rng.normal(size=(12, 8))
        a = SparseSymmetric.from_dense(g @ g.T)
        for _ in range(20):
            assert quad_form(a, rng.normal(size=12)) >= -1e-12

    def test_dimension_mismatch(self):
        a = SparseSymmetric.from_dense(np.eye(3))
        with pytest.raises(DimensionMismatch):
            quad_form(a, np.ones(2))


class TestStorage:
    def test_lower_triangle_enforced(self):
        with pytest.raises(ValueError):
            SparseSymmetric(3, [0], [2], [1.0])

    def test_duplicates_rejected(self):
        with pytest.raises(ValueError):
            SparseSymmetric(3, [1, 1], [0, 0], [1.0, 2.0])

    def test_dense_roundtrip(self):
        rng = np.random.default_rng(6)
        m = random_spd(10, rng)
        a = SparseSymmetric.from_dense(m)
        assert np.allclose(a.to_dense(), m)

    def test_banded_roundtrip(self):
        rng = np.random.default_rng(8)
        m = random_spd(12, rng, banded=True, hbw=2)
        b = BandedSymmetric.from_dense(m)
        assert np.allclose(b.to_dense(), m)
        assert np.allclose(b.to_sparse_symmetric().to_dense(), m)

    def test_triplet_file_roundtrip(self, tmp_path):
        rng = np.random.default_rng(9)
        m = random_spd(9, rng)
        a = SparseSymmetric.from_dense(m)
        path = tmp_path / "mat.txt"
        a.write_triplets(path)
        back = SparseSymmetric.read_triplets(path)
        assert back.dim == a.dim
        assert np.array_equal(back.rows, a.rows)
        assert np.allclose(back.vals, a.vals)
