"""Sparse symmetric and banded matrices with Cholesky factorization.

Storage keeps only the lower triangle. Factorization routes everything
through LAPACK's banded Cholesky (``pbtrf``): general sparse matrices are
first permuted with reverse Cuthill-McKee to compress their bandwidth, so
the same code path covers tridiagonal FEM systems, two-hop SPDE precisions
and the (nearly dense) joint precision blocks, degrading gracefully to a
full band when the pattern does not compress.
"""

from __future__ import annotations

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_solve_banded, cholesky_banded, solve_banded
from scipy.sparse.csgraph import reverse_cuthill_mckee

from .exceptions import DimensionMismatch, NotPositiveDefinite


class SparseSymmetric:
    """Symmetric matrix stored as lower-triangle triplets.

    Parameters
    ----------
    dim : int
        Matrix dimension (>= 1).
    rows, cols : int arrays
        Lower-triangle coordinates, ``rows >= cols``, no duplicates.
    vals : float array
        Entry values, aligned with ``rows``/``cols``.
    """

    def __init__(self, dim, rows, cols, vals):
        if dim < 1:
            raise DimensionMismatch("dimension must be >= 1")
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=np.float64)
        if not (rows.shape == cols.shape == vals.shape):
            raise DimensionMismatch("triplet arrays must have equal length")
        if rows.size and (rows.min() < 0 or rows.max() >= dim or cols.min() < 0):
            raise DimensionMismatch("triplet index out of range")
        if np.any(rows < cols):
            raise ValueError("entries must lie in the lower triangle (i >= j)")
        # canonical order, reject duplicates
        order = np.lexsort((cols, rows))
        rows, cols, vals = rows[order], cols[order], vals[order]
        if rows.size > 1:
            dup = (np.diff(rows) == 0) & (np.diff(cols) == 0)
            if dup.any():
                raise ValueError("duplicate (i, j) pairs in triplets")
        self.dim = int(dim)
        self.rows = rows
        self.cols = cols
        self.vals = vals

    @property
    def nnz(self):
        return self.vals.size

    @classmethod
    def from_scipy(cls, a):
        """Build from any scipy sparse matrix, keeping the lower triangle."""
        a = sp.coo_matrix(a)
        if a.shape[0] != a.shape[1]:
            raise DimensionMismatch("matrix must be square")
        lower = sp.tril(a).tocoo()
        lower.sum_duplicates()
        keep = lower.data != 0.0
        return cls(a.shape[0], lower.row[keep], lower.col[keep], lower.data[keep])

    @classmethod
    def from_dense(cls, a, tol=0.0):
        a = np.asarray(a, dtype=float)
        i, j = np.nonzero(np.abs(np.tril(a)) > tol)
        return cls(a.shape[0], i, j, a[i, j])

    def to_scipy(self):
        """Full symmetric matrix in CSR form."""
        off = self.rows != self.cols
        r = np.concatenate([self.rows, self.cols[off]])
        c = np.concatenate([self.cols, self.rows[off]])
        v = np.concatenate([self.vals, self.vals[off]])
        return sp.csr_matrix((v, (r, c)), shape=(self.dim, self.dim))

    def to_dense(self):
        return self.to_scipy().toarray()

    def diagonal(self):
        d = np.zeros(self.dim)
        on = self.rows == self.cols
        d[self.rows[on]] = self.vals[on]
        return d

    def with_values(self, vals):
        """Same pattern, new values (cheap: skips validation)."""
        out = object.__new__(SparseSymmetric)
        out.dim = self.dim
        out.rows = self.rows
        out.cols = self.cols
        out.vals = np.asarray(vals, dtype=np.float64)
        return out

    def add_diagonal(self, d):
        """Return self + diag(d); d may be a scalar."""
        d = np.broadcast_to(np.asarray(d, dtype=float), (self.dim,))
        return SparseSymmetric.from_scipy(self.to_scipy() + sp.diags(d))

    def write_triplets(self, path):
        """Debug dump: header line then one triplet per line. Not a stable format."""
        with open(path, "w") as fh:
            fh.write(f"symmetric {self.dim} {self.nnz}\n")
            for i, j, v in zip(self.rows, self.cols, self.vals):
                fh.write(f"{i} {j} {float(v)!r}\n")

    @classmethod
    def read_triplets(cls, path):
        with open(path) as fh:
            tag, dim, nnz = fh.readline().split()
            if tag != "symmetric":
                raise ValueError(f"unexpected header tag {tag!r}")
            dim, nnz = int(dim), int(nnz)
            rows = np.empty(nnz, dtype=np.int64)
            cols = np.empty(nnz, dtype=np.int64)
            vals = np.empty(nnz)
            for n in range(nnz):
                i, j, v = fh.readline().split()
                rows[n], cols[n], vals[n] = int(i), int(j), float(v)
        return cls(dim, rows, cols, vals)


class BandedSymmetric:
    """Symmetric banded matrix in LAPACK lower band storage.

    ``bands[d, j] = A[j + d, j]`` for diagonals ``d = 0 .. half_bandwidth``;
    trailing entries of each band row are ignored padding.
    """

    def __init__(self, dim, half_bandwidth, bands=None):
        if dim < 1 or half_bandwidth < 0:
            raise DimensionMismatch("need dim >= 1 and half_bandwidth >= 0")
        self.dim = int(dim)
        self.half_bandwidth = int(half_bandwidth)
        if bands is None:
            bands = np.zeros((self.half_bandwidth + 1, self.dim))
        bands = np.ascontiguousarray(bands, dtype=np.float64)
        if bands.shape != (self.half_bandwidth + 1, self.dim):
            raise DimensionMismatch("bands must have shape (half_bandwidth + 1, dim)")
        self.bands = bands

    @classmethod
    def from_dense(cls, a):
        a = np.asarray(a, dtype=float)
        n = a.shape[0]
        nz = np.nonzero(a)
        hbw = int(np.abs(nz[0] - nz[1]).max()) if nz[0].size else 0
        out = cls(n, hbw)
        for d in range(hbw + 1):
            out.bands[d, : n - d] = np.diagonal(a, -d)
        return out

    def to_dense(self):
        a = np.zeros((self.dim, self.dim))
        for d in range(self.half_bandwidth + 1):
            idx = np.arange(self.dim - d)
            a[idx + d, idx] = self.bands[d, : self.dim - d]
            a[idx, idx + d] = self.bands[d, : self.dim - d]
        return a

    def to_sparse_symmetric(self):
        rows, cols, vals = [], [], []
        for d in range(self.half_bandwidth + 1):
            j = np.arange(self.dim - d)
            rows.append(j + d)
            cols.append(j)
            vals.append(self.bands[d, : self.dim - d])
        return SparseSymmetric(
            self.dim, np.concatenate(rows), np.concatenate(cols), np.concatenate(vals)
        )

    def diagonal(self):
        return self.bands[0].copy()

    def add_diagonal(self, d):
        d = np.broadcast_to(np.asarray(d, dtype=float), (self.dim,))
        out = BandedSymmetric(self.dim, self.half_bandwidth, self.bands.copy())
        out.bands[0] += d
        return out


class CholeskyFactor:
    """Lower-triangular banded Cholesky factor, optionally under a permutation.

    Satisfies ``P A P' = L L'`` where ``P`` reorders indices by ``perm``
    (identity when ``perm`` is None).
    """

    def __init__(self, factor_band, perm=None):
        self.factor_band = factor_band
        self.perm = perm
        self.dim = factor_band.shape[1]
        self.log_determinant = 2.0 * float(np.sum(np.log(factor_band[0])))
        self._upper_band = None

    @property
    def half_bandwidth(self):
        return self.factor_band.shape[0] - 1

    def solve(self, b):
        """Solve A z = b for one or many right-hand sides (columns)."""
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.dim:
            raise DimensionMismatch(
                f"rhs has length {b.shape[0]}, factor dimension is {self.dim}"
            )
        if self.perm is None:
            return cho_solve_banded((self.factor_band, True), b)
        z = np.empty_like(b)
        z[self.perm] = cho_solve_banded((self.factor_band, True), b[self.perm])
        return z

    def solve_lt(self, b):
        """Solve L' v = b (permuted coordinates), used for posterior sampling.

        Returns z with z[perm] = v so that cov(z) = A^{-1} when b is
        standard normal.
        """
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.dim:
            raise DimensionMismatch("rhs length does not match factor dimension")
        if self._upper_band is None:
            hbw, n = self.half_bandwidth, self.dim
            ab = np.zeros((hbw + 1, n))
            for d in range(hbw + 1):
                # row hbw - d of upper storage holds superdiagonal d of L'
                ab[hbw - d, d:] = self.factor_band[d, : n - d]
            self._upper_band = ab
        v = solve_banded((0, self.half_bandwidth), self._upper_band, b)
        if self.perm is None:
            return v
        z = np.empty_like(v)
        z[self.perm] = v
        return z

    def factor_dense(self):
        """Dense L with P A P' = L L' (testing helper)."""
        n, hbw = self.dim, self.half_bandwidth
        L = np.zeros((n, n))
        for d in range(hbw + 1):
            idx = np.arange(n - d)
            L[idx + d, idx] = self.factor_band[d, : n - d]
        return L


def _band_from_csr(a_csr, dim, hbw):
    ab = np.zeros((hbw + 1, dim))
    coo = sp.tril(a_csr).tocoo()
    ab[coo.row - coo.col, coo.col] = coo.data
    return ab


def cholesky(a):
    """Cholesky factorization of an SPD SparseSymmetric or BandedSymmetric.

    General sparse input is permuted with reverse Cuthill-McKee when that
    shrinks the bandwidth; banded input is factored in place (no fill
    outside the band, identity permutation).

    Raises
    ------
    NotPositiveDefinite
        If a non-positive pivot is encountered.
    """
    if isinstance(a, BandedSymmetric):
        try:
            cb = cholesky_banded(a.bands, lower=True)
        except np.linalg.LinAlgError as err:
            raise NotPositiveDefinite(str(err)) from err
        return CholeskyFactor(cb, perm=None)
    if not isinstance(a, SparseSymmetric):
        raise TypeError(f"cannot factor object of type {type(a).__name__}")

    full = a.to_scipy()
    bw_nat = int(np.max(a.rows - a.cols)) if a.nnz else 0
    perm = np.asarray(reverse_cuthill_mckee(full, symmetric_mode=True))
    inv = np.empty_like(perm)
    inv[perm] = np.arange(a.dim)
    bw_rcm = int(np.max(np.abs(inv[a.rows] - inv[a.cols]))) if a.nnz else 0
    if bw_rcm < bw_nat:
        ab = _band_from_csr(full[perm][:, perm].tocsr(), a.dim, bw_rcm)
        use_perm = perm
    else:
        ab = _band_from_csr(full, a.dim, bw_nat)
        use_perm = None
    try:
        cb = cholesky_banded(ab, lower=True)
    except np.linalg.LinAlgError as err:
        raise NotPositiveDefinite(str(err)) from err
    return CholeskyFactor(cb, perm=use_perm)


def solve(factor, b):
    """Solve A z = b given a CholeskyFactor of A."""
    return factor.solve(b)


def quad_form(a, v):
    """v' A v touching only stored entries (off-diagonals counted twice)."""
    v = np.asarray(v, dtype=float)
    if isinstance(a, BandedSymmetric):
        a = a.to_sparse_symmetric()
    if v.shape != (a.dim,):
        raise DimensionMismatch(f"vector length {v.shape} does not match dim {a.dim}")
    terms = a.vals * v[a.rows] * v[a.cols]
    off = a.rows != a.cols
    return float(terms.sum() + terms[off].sum())
