"""Sparse symmetric linear algebra.

Cholesky factorization with a fill-reducing ordering, triangular solves,
log-determinants, sampling from Gaussians in precision form and the
selected (Takahashi) inverse.  The symbolic analysis is separated from the
numeric factorization so that matrices sharing one sparsity pattern (the
posterior precisions of a Gibbs chain) are refactored cheaply.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.io
import scipy.linalg
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.sparse.csgraph import reverse_cuthill_mckee

from . import _kernels
from .errors import DimensionMismatch, NotPositiveDefinite

DENSE_MAX_ORDER = 64
PIVOT_TOL = 1e-300


class SparseSym:
    """Symmetric sparse matrix stored through its upper triangle.

    Parameters
    ----------
    upper : sparse matrix
        Upper triangle including the diagonal. Entries below the diagonal
        are ignored. Explicit zeros are removed.
    """

    def __init__(self, upper):
        u = sp.triu(sp.csc_matrix(upper, dtype=float), format="csc")
        u.eliminate_zeros()
        u.sum_duplicates()
        u.sort_indices()
        if u.shape[0] != u.shape[1]:
            raise DimensionMismatch(f"matrix must be square, got {u.shape}")
        u.data.setflags(write=False)
        self._upper = u

    @classmethod
    def from_matrix(cls, m) -> "SparseSym":
        """Wrap a symmetric dense or sparse matrix (upper triangle is read)."""
        if isinstance(m, SparseSym):
            return m
        return cls(sp.csc_matrix(m))

    @classmethod
    def from_entries(cls, order: int, entries: dict) -> "SparseSym":
        """Build from a ``{(i, j): value}`` map; pairs may be given either way round."""
        rows, cols, vals = [], [], []
        for (i, j), v in entries.items():
            i, j = min(i, j), max(i, j)
            rows.append(i)
            cols.append(j)
            vals.append(v)
        u = sp.coo_matrix((vals, (rows, cols)), shape=(order, order))
        return cls(u)

    @property
    def order(self) -> int:
        return self._upper.shape[0]

    @property
    def shape(self):
        return self._upper.shape

    @property
    def upper(self) -> sp.csc_matrix:
        return self._upper.copy()

    @property
    def nnz(self) -> int:
        """Number of stored upper-triangle entries."""
        return self._upper.nnz

    def full(self) -> sp.csc_matrix:
        u = self._upper
        m = (u + sp.triu(u, k=1).T).tocsc()
        m.sort_indices()
        return m

    def toarray(self) -> np.ndarray:
        return self.full().toarray()

    def entries(self) -> dict:
        coo = self._upper.tocoo()
        return {(int(i), int(j)): float(v) for i, j, v in zip(coo.row, coo.col, coo.data)}

    def __getitem__(self, ij):
        i, j = ij
        return float(self._upper[min(i, j), max(i, j)])

    def __matmul__(self, x):
        return self.full() @ x

    def __repr__(self):
        return f"SparseSym(order={self.order}, nnz_upper={self.nnz})"


def _as_csc(m) -> sp.csc_matrix:
    if isinstance(m, SparseSym):
        out = m.full()
    else:
        out = sp.csc_matrix(m, dtype=float)
        out.sum_duplicates()
        out.sort_indices()
    if out.shape[0] != out.shape[1]:
        raise DimensionMismatch(f"matrix must be square, got {out.shape}")
    return out


def fill_reducing_order(pattern: sp.csc_matrix, method: str = "mmd") -> np.ndarray:
    """Symmetric ordering ``perm`` such that ``M[perm][:, perm]`` factors with little fill.

    ``method`` is ``"mmd"`` (minimum degree on the pattern of M), ``"rcm"``
    (reverse Cuthill-McKee) or ``"natural"``.
    """
    n = pattern.shape[0]
    if method == "natural" or n <= 2:
        return np.arange(n)
    s = sp.csc_matrix((np.ones(pattern.nnz), pattern.indices, pattern.indptr), shape=pattern.shape)
    s = ((s + s.T) != 0).astype(float).tocsc()
    if method == "rcm":
        return np.asarray(reverse_cuthill_mckee(s.tocsr(), symmetric_mode=True), dtype=np.int64)
    if method != "mmd":
        raise ValueError(f"unknown ordering {method!r}")
    # strictly diagonally dominant surrogate with the same pattern
    off = sp.triu(s, k=1)
    off = -(off + off.T)
    deg = np.asarray((off != 0).sum(axis=1)).ravel()
    surrogate = (off + sp.diags(deg + 1.0)).tocsc()
    lu = spla.splu(surrogate, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                   options=dict(SymmetricMode=True))
    return np.argsort(lu.perm_c).astype(np.int64)


@dataclass(frozen=True, eq=False)
class CholSymbolic:
    """Ordering and nonzero structure of the Cholesky factor of a fixed pattern.

    Matrices passed to :meth:`factor` must have the same (canonical CSC)
    pattern as the matrix used in :func:`analyze`.
    """

    order: int
    perm: np.ndarray
    indptr: np.ndarray
    indices: np.ndarray
    cmap: np.ndarray
    Cp: np.ndarray
    Ci: np.ndarray
    Lp: np.ndarray
    Li: np.ndarray
    Rp: np.ndarray
    Ri: np.ndarray
    dense: bool
    dense_rows: np.ndarray = field(default=None, repr=False)
    dense_cols: np.ndarray = field(default=None, repr=False)

    @property
    def iperm(self) -> np.ndarray:
        out = np.empty_like(self.perm)
        out[self.perm] = np.arange(self.order)
        return out

    @property
    def nnz_factor(self) -> int:
        return int(self.Lp[-1])

    def same_pattern(self, m: sp.csc_matrix) -> bool:
        return (m.shape == (self.order, self.order) and m.nnz == self.indices.shape[0]
                and np.array_equal(m.indptr, self.indptr) and np.array_equal(m.indices, self.indices))

    def factor(self, m) -> "CholFactor":
        m = _as_csc(m)
        if not self.same_pattern(m):
            raise DimensionMismatch("matrix pattern differs from the analyzed pattern")
        return self.factor_data(m.data)

    def factor_data(self, data: np.ndarray) -> "CholFactor":
        """Factor the matrix whose canonical CSC ``data`` array is given."""
        n = self.order
        if self.dense:
            a = np.zeros((n, n))
            a[self.dense_rows, self.dense_cols] = data
            try:
                ld = scipy.linalg.cholesky(a, lower=True, check_finite=False)
            except np.linalg.LinAlgError as exc:
                raise NotPositiveDefinite(f"Cholesky failed: {exc}") from None
            diag = np.diag(ld)
            bad = np.flatnonzero(~(diag > PIVOT_TOL))
            if bad.size:
                raise NotPositiveDefinite(f"non-positive pivot at index {int(bad[0])}")
            Lx = _dense_to_lx(ld, self.Lp, self.Li)
        else:
            Cx = np.ascontiguousarray(data[self.cmap])
            Lx = np.empty(self.Lp[-1])
            k = _kernels.numeric(n, self.Cp, self.Ci, Cx, self.Lp, self.Li, self.Rp, self.Ri, Lx, PIVOT_TOL)
            if k >= 0:
                raise NotPositiveDefinite(f"non-positive pivot at permuted index {k}")
        Lx.setflags(write=False)
        return CholFactor(self, Lx)

    def locate(self, rows, cols) -> np.ndarray:
        """Storage positions of the inverse entries (rows[t], cols[t]) in original indexing.

        Returns -1 where the pair lies outside the factor pattern.
        """
        ip = self.iperm
        r = ip[np.asarray(rows, dtype=np.int64)]
        c = ip[np.asarray(cols, dtype=np.int64)]
        lo = np.minimum(r, c)
        hi = np.maximum(r, c)
        return _kernels.locate(self.Lp, self.Li, hi, lo)


def _dense_to_lx(ld, Lp, Li):
    n = ld.shape[0]
    cols = np.repeat(np.arange(n), np.diff(Lp))
    return np.ascontiguousarray(ld[Li, cols])


def analyze(m, ordering: str = "mmd", dense_max: int = DENSE_MAX_ORDER) -> CholSymbolic:
    """Symbolic Cholesky analysis of the pattern of symmetric ``m``."""
    m = _as_csc(m)
    n = m.shape[0]
    dense = n <= dense_max
    perm = np.arange(n, dtype=np.int64) if dense else fill_reducing_order(m, ordering)
    # track where each canonical entry of m lands in the permuted upper triangle
    tag = sp.csc_matrix((np.arange(1, m.nnz + 1, dtype=float), m.indices, m.indptr), shape=m.shape)
    c = sp.triu(tag[perm][:, perm], format="csc")
    c.sort_indices()
    cmap = c.data.astype(np.int64) - 1
    Cp = c.indptr.astype(np.int64)
    Ci = c.indices.astype(np.int64)
    if dense:
        Lp = np.zeros(n + 1, dtype=np.int64)
        Lp[1:] = np.cumsum(np.arange(n, 0, -1))
        Li = np.concatenate([np.arange(j, n) for j in range(n)]).astype(np.int64) if n else np.zeros(0, np.int64)
        Rp = np.zeros(n + 1, dtype=np.int64)
        Rp[1:] = np.cumsum(np.arange(n))
        Ri = np.concatenate([np.arange(k) for k in range(n)]).astype(np.int64) if n else np.zeros(0, np.int64)
        coo = m.tocoo()
        extra = dict(dense_rows=coo.row.astype(np.int64), dense_cols=coo.col.astype(np.int64))
    else:
        parent = _kernels.etree(n, Cp, Ci)
        Rp, Ri, Lp, Li = _kernels.symbolic(n, Cp, Ci, parent)
        extra = {}
    arrays = dict(perm=perm, indptr=m.indptr.copy(), indices=m.indices.copy(), cmap=cmap, Cp=Cp,
                  Ci=Ci, Lp=Lp, Li=Li, Rp=Rp, Ri=Ri, **extra)
    for a in arrays.values():
        a.setflags(write=False)
    return CholSymbolic(order=n, dense=dense, **arrays)


@dataclass(frozen=True, eq=False)
class CholFactor:
    """Cholesky factor ``P M P^T = L L^T`` of a symmetric positive definite M."""

    symbolic: CholSymbolic
    Lx: np.ndarray

    @property
    def order(self) -> int:
        return self.symbolic.order

    @property
    def perm(self) -> np.ndarray:
        return self.symbolic.perm

    @property
    def L(self) -> sp.csc_matrix:
        s = self.symbolic
        return sp.csc_matrix((np.array(self.Lx), s.Li, s.Lp), shape=(s.order, s.order))

    def diag(self) -> np.ndarray:
        return self.Lx[self.symbolic.Lp[:-1]]

    def log_det(self) -> float:
        return 2.0 * float(np.sum(np.log(self.diag())))

    def _check(self, v):
        v = np.asarray(v, dtype=float)
        if v.shape[0] != self.order:
            raise DimensionMismatch(f"expected length {self.order}, got {v.shape[0]}")
        return v

    def solve(self, rhs) -> np.ndarray:
        rhs = self._check(rhs)
        s = self.symbolic
        if rhs.ndim == 2:
            return np.column_stack([self.solve(rhs[:, j]) for j in range(rhs.shape[1])])
        x = np.ascontiguousarray(rhs[s.perm])
        _kernels.lsolve(s.order, s.Lp, s.Li, self.Lx, x)
        _kernels.ltsolve(s.order, s.Lp, s.Li, self.Lx, x)
        out = np.empty_like(x)
        out[s.perm] = x
        return out

    def solve_lt(self, z) -> np.ndarray:
        """``P^T L^{-T} z``: maps standard normals to draws with covariance M^{-1}."""
        s = self.symbolic
        x = np.array(z, dtype=float)
        _kernels.ltsolve(s.order, s.Lp, s.Li, self.Lx, x)
        out = np.empty_like(x)
        out[s.perm] = x
        return out

    def sample(self, mean, rng: np.random.Generator) -> np.ndarray:
        mean = self._check(mean)
        return mean + self.solve_lt(rng.standard_normal(self.order))

    def inverse_values(self) -> np.ndarray:
        """Selected-inverse entries aligned with the factor storage (permuted indexing)."""
        s = self.symbolic
        return _kernels.takahashi(s.order, s.Lp, s.Li, self.Lx)

    def selected_inverse(self) -> SparseSym:
        s = self.symbolic
        z = self.inverse_values()
        cols = np.repeat(np.arange(s.order), np.diff(s.Lp))
        r = s.perm[s.Li]
        c = s.perm[cols]
        lo, hi = np.minimum(r, c), np.maximum(r, c)
        u = sp.coo_matrix((z, (lo, hi)), shape=(s.order, s.order))
        return SparseSym(u)


def chol_factor(m, ordering: str = "mmd") -> CholFactor:
    """Factor a symmetric positive definite matrix.

    Raises
    ------
    NotPositiveDefinite
        If a pivot is not larger than 1e-300.
    """
    m = _as_csc(m)
    return analyze(m, ordering=ordering).factor_data(m.data)


def solve(f: CholFactor, rhs) -> np.ndarray:
    return f.solve(rhs)


def log_det(f: CholFactor) -> float:
    return f.log_det()


def sample_gaussian(f: CholFactor, mean, rng: np.random.Generator) -> np.ndarray:
    """Draw from N(mean, M^{-1}) where ``f`` factors the precision M."""
    return f.sample(mean, rng)


def selected_inverse(f: CholFactor) -> SparseSym:
    """Entries of M^{-1} on the pattern of L + L^T."""
    return f.selected_inverse()


def write_matrix_market(path, m) -> None:
    """Write a symmetric matrix in Matrix Market coordinate format (1-based)."""
    u = SparseSym.from_matrix(m).upper
    # lower-triangle listing is what the symmetric format expects
    scipy.io.mmwrite(str(path), u.T.tocoo(), symmetry="symmetric", precision=17)


def read_matrix_market(path) -> SparseSym:
    m = scipy.io.mmread(str(path))
    return SparseSym(sp.csc_matrix(m))
