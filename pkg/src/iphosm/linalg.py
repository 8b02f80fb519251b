"""Sparse symmetric storage, factorization, conjugate gradients and small
dense symmetric eigensolvers."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp
from scipy.sparse.linalg import splu


class IndefiniteMatrixError(np.linalg.LinAlgError):
    """Raised when a matrix expected to be s.p.d. is not.

    ``pivot`` is the (original) row index where a nonpositive pivot appeared,
    or ``None`` if unknown.
    """

    def __init__(self, message, pivot=None):
        super().__init__(message)
        self.pivot = pivot


def _check_symmetric(A, rtol=1e-12):
    if sp.issparse(A):
        diff = abs(A - A.T).max() if A.nnz else 0.0
        scale = abs(A).max() if A.nnz else 0.0
    else:
        A = np.asarray(A)
        if A.ndim != 2 or A.shape[0] != A.shape[1]:
            raise ValueError(f"expected a square matrix, got shape {A.shape}")
        diff = np.abs(A - A.T).max(initial=0.0)
        scale = np.abs(A).max(initial=0.0)
    if diff > rtol * max(scale, 1e-300):
        raise ValueError(f"matrix is not symmetric (max |A - A^T| = {diff:.3e})")


class SparseSym:
    """Symmetric sparse matrix stored by its lower triangle.

    Duplicate triplets are summed on construction.
    """

    def __init__(self, n: int, rows, cols, vals):
        rows = np.asarray(rows, dtype=np.int64)
        cols = np.asarray(cols, dtype=np.int64)
        vals = np.asarray(vals, dtype=float)
        if rows.size and (min(rows.min(), cols.min()) < 0 or max(rows.max(), cols.max()) >= n):
            raise IndexError("triplet index out of range")
        full = sp.coo_matrix((vals, (rows, cols)), shape=(n, n)).tocsr()
        full.sum_duplicates()
        _check_symmetric(full, rtol=1e-10)
        self.n = n
        self.lower = sp.tril(full, format="csr")

    @classmethod
    def from_matrix(cls, A) -> "SparseSym":
        A = sp.coo_matrix(A)
        return cls(A.shape[0], A.row, A.col, A.data)

    @property
    def shape(self):
        return (self.n, self.n)

    def tocsr(self) -> sp.csr_matrix:
        strict = sp.tril(self.lower, k=-1)
        return (self.lower + strict.T).tocsr()

    def matvec(self, x):
        strict = sp.tril(self.lower, k=-1, format="csr")
        return self.lower @ x + strict.T @ x


@dataclass
class Factorization:
    """Reusable sparse LDL^T-type factorization (SuperLU, symmetric mode)."""

    n: int
    _lu: object = field(repr=False)
    perm: np.ndarray = field(repr=False)
    pivots: np.ndarray = field(repr=False)

    def solve(self, b):
        b = np.asarray(b, dtype=float)
        if b.shape[0] != self.n:
            raise ValueError(f"rhs has {b.shape[0]} rows, matrix has {self.n}")
        if b.ndim == 2 and b.shape[1] == 0:
            return np.zeros_like(b)
        return self._lu.solve(b)


def factorize(A) -> Factorization:
    """Factor a symmetric positive definite matrix.

    The elimination uses a symmetric fill-reducing ordering without row
    pivoting, so the diagonal of ``U`` carries the ``D`` of ``LDL^T`` and its
    signs give the inertia. A nonpositive pivot raises
    ``IndefiniteMatrixError`` naming the offending row.
    """
    if isinstance(A, SparseSym):
        A = A.tocsr()
    A = sp.csc_matrix(A, dtype=float)
    n = A.shape[0]
    _check_symmetric(A, rtol=1e-10)
    if n == 0:
        return Factorization(0, _Empty(), np.zeros(0, int), np.zeros(0))
    try:
        lu = splu(A, permc_spec="MMD_AT_PLUS_A", diag_pivot_thresh=0.0,
                  options={"SymmetricMode": True})
    except RuntimeError as exc:
        raise IndefiniteMatrixError(f"singular matrix: {exc}") from exc
    if not np.array_equal(lu.perm_r, lu.perm_c):
        raise IndefiniteMatrixError("factorization required off-diagonal pivoting; matrix not s.p.d.")
    d = lu.U.diagonal()
    bad = np.flatnonzero(d <= 0.0)
    if bad.size:
        # perm_c[orig] = position; invert to find the original row
        inv = np.empty(n, dtype=np.int64)
        inv[lu.perm_c] = np.arange(n)
        row = int(inv[bad[0]])
        raise IndefiniteMatrixError(f"nonpositive pivot {d[bad[0]]:.3e} at row {row}", pivot=row)
    return Factorization(n, lu, lu.perm_c, d)


class _Empty:
    def solve(self, b):
        return np.zeros_like(b)


@dataclass
class CGResult:
    x: np.ndarray
    iterations: int
    history: list
    converged: bool


def cg(apply, b, tol: float = 1e-10, maxit: int | None = None, x0=None) -> CGResult:
    """Unpreconditioned conjugate gradients for an s.p.d. operator.

    Stops when ``||b - A x|| <= tol * ||b||``. ``history`` holds the
    residual norms, starting with the initial one.
    """
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    maxit = 10 * n if maxit is None else maxit
    x = np.zeros(n) if x0 is None else np.array(x0, dtype=float)
    r = b - apply(x) if x0 is not None else b.copy()
    bnorm = np.linalg.norm(b)
    rnorm = np.linalg.norm(r)
    history = [rnorm]
    if rnorm <= tol * bnorm or bnorm == 0.0 and rnorm == 0.0:
        return CGResult(x, 0, history, True)
    p = r.copy()
    rr = rnorm * rnorm
    for it in range(1, maxit + 1):
        Ap = apply(p)
        pAp = float(p @ Ap)
        if pAp <= 0.0:
            raise IndefiniteMatrixError(f"CG breakdown at iteration {it}: p^T A p = {pAp:.3e}")
        step = rr / pAp
        x += step * p
        r -= step * Ap
        rr_new = float(r @ r)
        history.append(np.sqrt(rr_new))
        if history[-1] <= tol * bnorm:
            return CGResult(x, it, history, True)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return CGResult(x, maxit, history, False)


def dense_eig_sym(A, vectors: bool = False):
    """Eigenvalues (ascending) of a dense symmetric matrix."""
    A = np.asarray(A, dtype=float)
    _check_symmetric(A, rtol=1e-10)
    if vectors:
        return np.linalg.eigh(A)
    return np.linalg.eigvalsh(A)


def generalized_eig_sym(A, B, vectors: bool = False):
    """Eigenvalues of ``B^{-1} A`` for symmetric ``A`` and s.p.d. ``B``.

    Reduces to the symmetric matrix ``L^{-1} A L^{-T}`` with ``B = L L^T``.
    Eigenvectors, when requested, are ``B``-orthonormal.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    _check_symmetric(A, rtol=1e-10)
    _check_symmetric(B, rtol=1e-10)
    try:
        L = sla.cholesky(B, lower=True)
    except np.linalg.LinAlgError as exc:
        raise IndefiniteMatrixError(f"B is not positive definite: {exc}") from exc
    C = sla.solve_triangular(L, sla.solve_triangular(L, A, lower=True).T, lower=True)
    C = 0.5 * (C + C.T)
    if not vectors:
        return np.linalg.eigvalsh(C)
    w, Y = np.linalg.eigh(C)
    return w, sla.solve_triangular(L.T, Y, lower=False)


def inverse_sqrt_sym(B) -> np.ndarray:
    """``B^{-1/2}`` of an s.p.d. matrix via its spectral decomposition."""
    w, V = dense_eig_sym(B, vectors=True)
    if w.min() <= 0.0:
        raise IndefiniteMatrixError("matrix is not positive definite")
    return (V / np.sqrt(w)) @ V.T
