# linalg.py — dense float64 matrix/vector substrate: products, LU solve, 2-norms

from __future__ import annotations

import math

import numpy as np

from errors import ContractError, SingularMatrixError

# ----------------- tunables -----------------
PIVOT_TOL = 1e-12          # |pivot| at or below this declares the matrix singular
POWER_ITER_TOL = 1e-10     # relative change of the Rayleigh quotient that stops iteration
POWER_ITER_MAX = 10_000
_START_SEED = 0            # fixed start vector keeps spectral_norm a pure function
# --------------------------------------------

Matrix = np.ndarray
Vector = np.ndarray


# ---------- validation ----------
def as_matrix(m, name: str = "matrix") -> Matrix:
    a = np.asarray(m, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] < 1 or a.shape[1] < 1:
        raise ContractError(f"{name} must be a non-empty 2-D array, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


def as_vector(v, name: str = "vector") -> Vector:
    a = np.asarray(v, dtype=np.float64)
    if a.ndim != 1:
        raise ContractError(f"{name} must be 1-D, got shape {a.shape}")
    if not np.all(np.isfinite(a)):
        raise ContractError(f"{name} has non-finite entries")
    return a


def _require_square(a: Matrix) -> int:
    if a.shape[0] != a.shape[1]:
        raise ContractError(f"square matrix required, got {a.shape[0]}x{a.shape[1]}")
    return a.shape[0]


# ---------- products ----------
def mat_vec(m, v) -> Vector:
    m = as_matrix(m)
    v = as_vector(v)
    if m.shape[1] != v.shape[0]:
        raise ContractError(f"dimension mismatch: {m.shape[0]}x{m.shape[1]} matrix times length-{v.shape[0]} vector")
    return m @ v


def vector_norm(v) -> float:
    return float(np.linalg.norm(as_vector(v)))


# ---------- LU with partial pivoting ----------
def lu_factor(a) -> tuple[Matrix, np.ndarray]:
    """
    Doolittle LU with row pivoting. Returns the packed factors (unit lower
    triangle below the diagonal, U on and above) and the row permutation.
    """
    lu = as_matrix(a).copy()
    n = _require_square(lu)
    perm = np.arange(n)

    for k in range(n):
        p = k + int(np.argmax(np.abs(lu[k:, k])))
        pivot = abs(lu[p, k])
        if pivot <= PIVOT_TOL:
            raise SingularMatrixError(f"pivot {pivot:.3e} at column {k} is below {PIVOT_TOL:g}")
        if p != k:
            lu[[k, p]] = lu[[p, k]]
            perm[[k, p]] = perm[[p, k]]
        lu[k + 1:, k] /= lu[k, k]
        lu[k + 1:, k + 1:] -= np.outer(lu[k + 1:, k], lu[k, k + 1:])

    return lu, perm


def _substitute(lu: Matrix, perm: np.ndarray, b: Vector) -> Vector:
    n = lu.shape[0]
    y = b[perm].copy()
    for i in range(n):
        y[i] -= lu[i, :i] @ y[:i]
    for i in range(n - 1, -1, -1):
        y[i] = (y[i] - lu[i, i + 1:] @ y[i + 1:]) / lu[i, i]
    return y


def lu_solve(a, b) -> Vector:
    lu, perm = lu_factor(a)
    b = as_vector(b, "b")
    if b.shape[0] != lu.shape[0]:
        raise ContractError(f"right-hand side has length {b.shape[0]}, expected {lu.shape[0]}")
    return _substitute(lu, perm, b)


def inverse(a) -> Matrix:
    """Column-by-column inverse from a single factorization."""
    lu, perm = lu_factor(a)
    n = lu.shape[0]
    eye = np.eye(n)
    return np.column_stack([_substitute(lu, perm, eye[:, j]) for j in range(n)])


# ---------- 2-norms ----------
def spectral_norm(m) -> float:
    """Largest singular value by power iteration on mᵀm."""
    m = as_matrix(m)
    if not np.any(m):
        return 0.0

    gram = m.T @ m
    x = np.random.default_rng(_START_SEED).standard_normal(gram.shape[0])
    x /= np.linalg.norm(x)

    lam = 0.0
    for _ in range(POWER_ITER_MAX):
        y = gram @ x
        y_norm = np.linalg.norm(y)
        if y_norm == 0.0:
            break
        x = y / y_norm
        lam_new = float(x @ (gram @ x))
        if lam_new > 0.0 and abs(lam_new - lam) <= POWER_ITER_TOL * lam_new:
            lam = lam_new
            break
        lam = lam_new

    return math.sqrt(max(lam, 0.0))


def condition_number_2(m) -> float:
    m = as_matrix(m)
    _require_square(m)
    return spectral_norm(m) * spectral_norm(inverse(m))
