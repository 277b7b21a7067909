"""Minimal dense linear algebra for the verification path.

Matrices are 2-D float64 numpy arrays. Products delegate to numpy;
the inverse is an in-house LU with partial pivoting so the singularity
threshold (|pivot| < 1e-12) is an explicit contract, and the triangular
solve is a column-oriented forward substitution that runs in O(nnz) per
right-hand side when a sparsity descriptor is supplied.
"""

from __future__ import annotations

import numpy as np

from .errors import ShapeError, SingularMatrixError, ZeroDiagonalError

PIVOT_TOL = 1e-12

# Finite checks after every operation; benchmarks switch this off.
check_finite = True


def _checked(a: np.ndarray) -> np.ndarray:
    if check_finite and not np.all(np.isfinite(a)):
        raise ShapeError("non-finite entries in matrix")
    return a


def as_matrix(a) -> np.ndarray:
    out = np.ascontiguousarray(a, dtype=np.float64)
    if out.ndim != 2:
        raise ShapeError(f"expected a 2-D matrix, got ndim={out.ndim}")
    return _checked(out)


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"matmul shapes {a.shape} x {b.shape}")
    return _checked(a @ b)


def hadamard(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    if a.shape != b.shape:
        raise ShapeError(f"hadamard shapes {a.shape} vs {b.shape}")
    return _checked(a * b)


def matrix_power(a: np.ndarray, k: int) -> np.ndarray:
    """A^k by repeated squaring; k = 0 gives the identity."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"matrix_power needs a square matrix, got {a.shape}")
    if k < 0:
        raise ShapeError("matrix_power needs k >= 0")
    result = np.eye(a.shape[0], dtype=a.dtype)
    base = a.copy()
    while k:
        if k & 1:
            result = result @ base
        k >>= 1
        if k:
            base = base @ base
    return _checked(result)


def max_row_abs_sum(a: np.ndarray) -> float:
    """The l-infinity operator norm."""
    if a.size == 0:
        return 0.0
    return float(np.abs(a).sum(axis=1).max())


def lu_factor(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """In-place LU with partial pivoting: returns (LU, perm) with L unit
    lower / U upper packed together and row permutation perm."""
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"lu_factor needs a square matrix, got {a.shape}")
    n = a.shape[0]
    lu = np.array(a, dtype=np.float64, copy=True)
    perm = np.arange(n)
    for k in range(n):
        pivot_row = k + int(np.argmax(np.abs(lu[k:, k])))
        if abs(lu[pivot_row, k]) < PIVOT_TOL:
            raise SingularMatrixError(f"pivot {lu[pivot_row, k]:g} below {PIVOT_TOL:g} at column {k}")
        if pivot_row != k:
            lu[[k, pivot_row]] = lu[[pivot_row, k]]
            perm[[k, pivot_row]] = perm[[pivot_row, k]]
        mult = lu[k + 1:, k] / lu[k, k]
        lu[k + 1:, k] = mult
        lu[k + 1:, k + 1:] -= np.outer(mult, lu[k, k + 1:])
    return lu, perm


def lu_solve(lu: np.ndarray, perm: np.ndarray, b: np.ndarray) -> np.ndarray:
    n = lu.shape[0]
    x = np.array(b[perm], dtype=np.float64, copy=True)
    if x.ndim == 1:
        x = x[:, None]
        squeeze = True
    else:
        squeeze = False
    for k in range(1, n):
        x[k] -= lu[k, :k] @ x[:k]
    for k in range(n - 1, -1, -1):
        x[k] -= lu[k, k + 1:] @ x[k + 1:]
        x[k] /= lu[k, k]
    return x[:, 0] if squeeze else x


def inverse(a: np.ndarray) -> np.ndarray:
    """Dense inverse via LU; raises SingularMatrixError below the pivot
    tolerance."""
    lu, perm = lu_factor(a)
    return _checked(lu_solve(lu, perm, np.eye(a.shape[0])))


def solve_lower_triangular(
    lmat: np.ndarray,
    b: np.ndarray,
    column_rows: list[np.ndarray] | None = None,
) -> np.ndarray:
    """Forward substitution for lower-triangular lmat.

    `column_rows`, when given, lists for each column j the strictly-lower
    row indices with nonzero entries; the solve then touches only those,
    costing O(nnz) per right-hand side.
    """
    n = lmat.shape[0]
    if lmat.ndim != 2 or lmat.shape[1] != n:
        raise ShapeError(f"solve_lower_triangular needs square, got {lmat.shape}")
    diag = np.diagonal(lmat)
    if np.any(diag == 0.0):
        raise ZeroDiagonalError("zero on the diagonal of the triangular factor")
    x = np.array(b, dtype=np.float64, copy=True)
    squeeze = x.ndim == 1
    if squeeze:
        x = x[:, None]
    if x.shape[0] != n:
        raise ShapeError(f"rhs rows {x.shape[0]} != {n}")
    if column_rows is None:
        for j in range(n):
            x[j] /= diag[j]
            if j + 1 < n:
                x[j + 1:] -= np.outer(lmat[j + 1:, j], x[j])
    else:
        for j in range(n):
            x[j] /= diag[j]
            rows = column_rows[j]
            if len(rows):
                x[rows] -= np.outer(lmat[rows, j], x[j])
    return _checked(x[:, 0] if squeeze else x)
