"""Compressed sparse row matrices and the linear solvers used by the FEM code.

The matrix type is a thin immutable container; products are computed with
numpy, direct factorizations are delegated to SuperLU through scipy, and the
Krylov solvers (Jacobi-preconditioned CG and BiCGStab) are implemented here.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Callable, Iterable

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla


class SparseError(ValueError):
    """Invalid sparse matrix construction or dimension mismatch."""


class SolverError(RuntimeError):
    """An iterative solve did not reach the requested tolerance."""

    def __init__(self, message: str, residual: float = float("nan"), iterations: int = 0):
        super().__init__(message)
        self.residual = residual
        self.iterations = iterations


class FactorizationError(RuntimeError):
    """Direct factorization failed (singular matrix)."""


class SolveMethod(str, Enum):
    DIRECT_LU = "direct_lu"
    CG = "cg"
    BICGSTAB = "bicgstab"


@dataclass(frozen=True)
class SolveOptions:
    method: SolveMethod = SolveMethod.DIRECT_LU
    rel_tol: float = 1e-10
    max_iter: int = 5000

    def __post_init__(self):
        object.__setattr__(self, "method", SolveMethod(self.method))
        if not self.rel_tol > 0:
            raise ValueError("rel_tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")


@dataclass(frozen=True, eq=False)
class SparseMatrix:
    """CSR matrix. Arrays are stored read-only."""

    n_rows: int
    n_cols: int
    row_offsets: np.ndarray
    col_indices: np.ndarray
    values: np.ndarray
    _scipy: sp.csr_matrix | None = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        ro = np.asarray(self.row_offsets, dtype=np.int64)
        ci = np.asarray(self.col_indices, dtype=np.int64)
        va = np.asarray(self.values, dtype=float)
        if ro.shape != (self.n_rows + 1,) or ro[0] != 0 or np.any(np.diff(ro) < 0):
            raise SparseError("row_offsets must be non-decreasing with length n_rows+1")
        if ro[-1] != va.size or ci.size != va.size:
            raise SparseError("row_offsets[-1] must equal the number of stored values")
        if ci.size and (ci.min() < 0 or ci.max() >= self.n_cols):
            raise SparseError("column index out of range")
        # strictly increasing columns inside every row
        if ci.size > 1:
            rows = np.repeat(np.arange(self.n_rows), np.diff(ro))
            same_row = rows[1:] == rows[:-1]
            if np.any(ci[1:][same_row] <= ci[:-1][same_row]):
                raise SparseError("column indices must be strictly increasing within a row")
        for a in (ro, ci, va):
            a.setflags(write=False)
        object.__setattr__(self, "row_offsets", ro)
        object.__setattr__(self, "col_indices", ci)
        object.__setattr__(self, "values", va)

    @property
    def shape(self) -> tuple[int, int]:
        return (self.n_rows, self.n_cols)

    @property
    def nnz(self) -> int:
        return int(self.values.size)

    def to_scipy(self) -> sp.csr_matrix:
        if self._scipy is None:
            m = sp.csr_matrix(
                (self.values, self.col_indices, self.row_offsets), shape=self.shape
            )
            object.__setattr__(self, "_scipy", m)
        return self._scipy

    def toarray(self) -> np.ndarray:
        return self.to_scipy().toarray()

    def diagonal(self) -> np.ndarray:
        return self.to_scipy().diagonal()

    def __matmul__(self, x):
        return spmv(self, x)

    def __add__(self, other: SparseMatrix) -> SparseMatrix:
        return from_scipy(self.to_scipy() + other.to_scipy())

    def __sub__(self, other: SparseMatrix) -> SparseMatrix:
        return from_scipy(self.to_scipy() - other.to_scipy())

    def scale(self, alpha: float) -> SparseMatrix:
        return SparseMatrix(self.n_rows, self.n_cols, self.row_offsets,
                            self.col_indices, alpha * self.values)

    def transpose(self) -> SparseMatrix:
        return from_scipy(self.to_scipy().T.tocsr())


def from_scipy(m) -> SparseMatrix:
    m = sp.csr_matrix(m)
    m.sum_duplicates()
    m.sort_indices()
    return SparseMatrix(m.shape[0], m.shape[1], m.indptr, m.indices, m.data)


def csr_from_triplets(entries: Iterable[tuple[int, int, float]] | tuple[np.ndarray, np.ndarray, np.ndarray],
                      n_rows: int, n_cols: int) -> SparseMatrix:
    """Build a canonical CSR matrix, summing duplicate ``(row, col)`` entries.

    ``entries`` is either an iterable of ``(row, col, value)`` triplets or a
    tuple of three equal-length arrays ``(rows, cols, values)``.
    """
    if isinstance(entries, tuple) and len(entries) == 3 and all(
        isinstance(e, np.ndarray) for e in entries
    ):
        rows, cols, vals = (np.asarray(e).ravel() for e in entries)
    else:
        entries = list(entries)
        if entries:
            rows, cols, vals = (np.asarray(c) for c in zip(*entries))
        else:
            rows = cols = np.zeros(0, dtype=np.int64)
            vals = np.zeros(0)
    rows = rows.astype(np.int64)
    cols = cols.astype(np.int64)
    vals = vals.astype(float)
    if rows.size and (rows.min() < 0 or rows.max() >= n_rows or cols.min() < 0 or cols.max() >= n_cols):
        raise SparseError("triplet index out of range")

    key = rows * n_cols + cols
    order = np.argsort(key, kind="stable")
    key = key[order]
    uniq, start = np.unique(key, return_index=True)
    summed = np.add.reduceat(vals[order], start) if key.size else np.zeros(0)
    urows = uniq // n_cols
    ucols = uniq % n_cols
    offsets = np.zeros(n_rows + 1, dtype=np.int64)
    np.add.at(offsets, urows + 1, 1)
    return SparseMatrix(n_rows, n_cols, np.cumsum(offsets), ucols, summed)


def spmv(m: SparseMatrix, x) -> np.ndarray:
    """Exact CSR product ``m @ x``; ``x`` may be a vector or a column stack."""
    x = np.asarray(x)
    if x.shape[0] != m.n_cols:
        raise SparseError(f"dimension mismatch: matrix has {m.n_cols} columns, vector {x.shape[0]}")
    return m.to_scipy() @ x


def _check_square(m: SparseMatrix, b: np.ndarray):
    if m.n_rows != m.n_cols:
        raise SparseError("matrix must be square")
    if b.shape[0] != m.n_rows:
        raise SparseError("right-hand side has wrong length")


def _jacobi(m: SparseMatrix) -> np.ndarray:
    d = m.diagonal()
    inv = np.ones_like(d)
    nz = d != 0
    inv[nz] = 1.0 / d[nz]
    return inv


def conjugate_gradient(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, *,
                       precond: np.ndarray | Callable | None = None, x0=None,
                       rel_tol: float = 1e-10, max_iter: int = 5000) -> tuple[np.ndarray, int, float]:
    """Preconditioned CG for a symmetric positive definite operator.

    Returns ``(x, iterations, relative_residual)``; raises ``SolverError`` if
    the relative residual does not drop below ``rel_tol`` within ``max_iter``.
    """
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    if precond is None:
        prec = lambda r: r
    elif callable(precond):
        prec = precond
    else:
        prec = lambda r, d=precond: d * r
    r = b - apply(x) if x0 is not None else b.copy()
    z = prec(r)
    p = z.copy()
    rz = r @ z
    rel = np.linalg.norm(r) / bnorm
    for it in range(1, max_iter + 1):
        if rel <= rel_tol:
            return x, it - 1, rel
        ap = apply(p)
        pap = p @ ap
        if pap <= 0:
            raise SolverError("operator is not positive definite", rel, it)
        alpha = rz / pap
        x += alpha * p
        r -= alpha * ap
        rel = np.linalg.norm(r) / bnorm
        z = prec(r)
        rz_new = r @ z
        p = z + (rz_new / rz) * p
        rz = rz_new
    if rel <= rel_tol:
        return x, max_iter, rel
    raise SolverError(f"CG did not converge in {max_iter} iterations (residual {rel:.3e})",
                      rel, max_iter)


def bicgstab(apply: Callable[[np.ndarray], np.ndarray], b: np.ndarray, *,
             precond: np.ndarray | None = None, x0=None, rel_tol: float = 1e-10,
             max_iter: int = 5000) -> tuple[np.ndarray, int, float]:
    """Right-preconditioned BiCGStab (van der Vorst) for nonsymmetric systems."""
    b = np.asarray(b, dtype=float)
    bnorm = np.linalg.norm(b)
    if bnorm == 0.0:
        return np.zeros_like(b), 0, 0.0
    d = np.ones_like(b) if precond is None else precond
    x = np.zeros_like(b) if x0 is None else np.array(x0, dtype=float)
    r = b - apply(x)
    r_hat = r.copy()
    rho = alpha = omega = 1.0
    v = np.zeros_like(b)
    p = np.zeros_like(b)
    rel = np.linalg.norm(r) / bnorm
    for it in range(1, max_iter + 1):
        if rel <= rel_tol:
            return x, it - 1, rel
        rho_new = r_hat @ r
        if rho_new == 0.0:
            raise SolverError("BiCGStab breakdown (rho = 0)", rel, it)
        beta = (rho_new / rho) * (alpha / omega)
        p = r + beta * (p - omega * v)
        p_hat = d * p
        v = apply(p_hat)
        alpha = rho_new / (r_hat @ v)
        s = r - alpha * v
        if np.linalg.norm(s) / bnorm <= rel_tol:
            x += alpha * p_hat
            return x, it, np.linalg.norm(s) / bnorm
        s_hat = d * s
        t = apply(s_hat)
        tt = t @ t
        omega = (t @ s) / tt if tt > 0 else 0.0
        x += alpha * p_hat + omega * s_hat
        r = s - omega * t
        rho = rho_new
        rel = np.linalg.norm(r) / bnorm
        if omega == 0.0 and rel > rel_tol:
            raise SolverError("BiCGStab breakdown (omega = 0)", rel, it)
    if rel <= rel_tol:
        return x, max_iter, rel
    raise SolverError(f"BiCGStab did not converge in {max_iter} iterations (residual {rel:.3e})",
                      rel, max_iter)


def factorize(m: SparseMatrix, opts: SolveOptions | None = None) -> Callable[[np.ndarray], np.ndarray]:
    """Return a reusable solver ``b -> m^{-1} b``.

    For ``direct_lu`` the factorization happens once here; ``b`` may then be a
    vector or a 2D column stack. Krylov methods re-solve per call, column by
    column, warm-started from the previous solution.
    """
    opts = opts or SolveOptions()
    if m.n_rows != m.n_cols:
        raise SparseError("matrix must be square")
    if opts.method is SolveMethod.DIRECT_LU:
        try:
            lu = spla.splu(m.to_scipy().tocsc())
        except RuntimeError as exc:
            raise FactorizationError(str(exc)) from exc
        if not np.all(np.isfinite(lu.U.diagonal())) or np.any(lu.U.diagonal() == 0):
            raise FactorizationError("matrix is singular")
        return lu.solve

    mat = m.to_scipy()
    dinv = _jacobi(m)
    krylov = conjugate_gradient if opts.method is SolveMethod.CG else bicgstab
    last: dict[int, np.ndarray] = {}

    def solve(b):
        b = np.asarray(b, dtype=float)
        cols = b.reshape(b.shape[0], -1)
        out = np.empty_like(cols)
        for j in range(cols.shape[1]):
            x, _, _ = krylov(lambda v: mat @ v, cols[:, j], precond=dinv, x0=last.get(j),
                             rel_tol=opts.rel_tol, max_iter=opts.max_iter)
            last[j] = x
            out[:, j] = x
        return out.reshape(b.shape)

    return solve


def solve_linear(m: SparseMatrix, b, opts: SolveOptions | None = None) -> np.ndarray:
    """Solve ``m x = b`` to a residual of at most ``rel_tol * |b|``.

    Direct solves get one step of iterative refinement when the first
    residual misses the tolerance.
    """
    opts = opts or SolveOptions()
    b = np.asarray(b, dtype=float)
    _check_square(m, b)
    solve = factorize(m, opts)
    x = solve(b)
    if opts.method is SolveMethod.DIRECT_LU:
        bnorm = np.linalg.norm(b)
        res = b - spmv(m, x)
        if np.linalg.norm(res) > opts.rel_tol * bnorm:
            x = x + solve(res)
            res = b - spmv(m, x)
        if np.linalg.norm(res) > opts.rel_tol * bnorm:
            rel = float(np.linalg.norm(res) / bnorm)
            raise SolverError(f"direct solve residual {rel:.3e} above tolerance", rel, 1)
    return x
