import numpy as np
import pytest

from conftest import jacobi_singular_values
from errors import ContractError, SingularMatrixError
from linalg import condition_number_2, inverse, lu_factor, lu_solve, mat_vec, spectral_norm, vector_norm


def test_mat_vec_dimension_mismatch() -> None:
    with pytest.raises(ContractError):
        mat_vec(np.ones((2, 3)), np.ones(2))


def test_mat_vec_rejects_non_finite() -> None:
    with pytest.raises(ContractError):
        mat_vec(np.array([[1.0, np.nan]]), np.ones(2))


def test_lu_solve_known_system() -> None:
    a = np.array([[2.0, 1.0, 1.0], [4.0, -6.0, 0.0], [-2.0, 7.0, 2.0]])
    x = lu_solve(a, np.array([5.0, -2.0, 9.0]))
    assert np.allclose(x, [1.0, 1.0, 2.0], atol=1e-12)


def test_lu_needs_pivoting() -> None:
    a = np.array([[0.0, 1.0], [1.0, 0.0]])
    assert np.allclose(lu_solve(a, np.array([3.0, 4.0])), [4.0, 3.0])


def test_singular_matrix_raises() -> None:
    with pytest.raises(SingularMatrixError):
        lu_factor(np.array([[1.0, 2.0], [2.0, 4.0]]))


def test_lu_rejects_non_square() -> None:
    with pytest.raises(ContractError):
        lu_factor(np.ones((2, 3)))


def test_inverse_times_matrix_is_identity() -> None:
    rng = np.random.default_rng(0)
    a = rng.normal(size=(5, 5)) + 5 * np.eye(5)
    assert np.allclose(inverse(a) @ a, np.eye(5), atol=1e-12)


def test_spectral_norm_matches_jacobi_oracle() -> None:
    rng = np.random.default_rng(1)
    for shape in [(4, 4), (6, 3), (3, 7)]:
        a = rng.normal(size=shape)
        assert spectral_norm(a) == pytest.approx(jacobi_singular_values(a)[0], rel=1e-8)


def test_spectral_norm_of_zero_matrix() -> None:
    assert spectral_norm(np.zeros((3, 3))) == 0.0


def test_condition_numbers() -> None:
    assert condition_number_2(np.eye(4)) == pytest.approx(1.0, abs=1e-12)
    assert condition_number_2(np.diag([1.0, 10.0])) == pytest.approx(10.0, rel=1e-9)


def test_vector_norm() -> None:
    assert vector_norm([3.0, 4.0]) == 5.0


def test_mat_vec_identity_zero_and_loop_oracle() -> None:
    rng = np.random.default_rng(2)
    v = rng.normal(size=4)
    assert np.array_equal(mat_vec(np.eye(4), v), v)
    assert np.array_equal(mat_vec(np.zeros((3, 4)), v), np.zeros(3))
    for shape in [(1, 1), (3, 5), (6, 2)]:
        m = rng.normal(size=shape)
        x = rng.normal(size=shape[1])
        expect = [sum(m[i, j] * x[j] for j in range(shape[1])) for i in range(shape[0])]
        assert np.allclose(mat_vec(m, x), expect, rtol=1e-12, atol=1e-12)


def test_lu_solve_residual_and_round_trip() -> None:
    rng = np.random.default_rng(3)
    for n in (1, 2, 5, 9):
        a = rng.normal(size=(n, n)) + n * np.eye(n)
        x0 = rng.normal(size=n)
        b = a @ x0
        x = lu_solve(a, b)
        assert np.max(np.abs(a @ x - b)) <= 1e-10 * max(1.0, np.max(np.abs(b)))
        assert np.allclose(x, x0, rtol=1e-10, atol=1e-12)


def test_spectral_norm_scales_with_the_matrix() -> None:
    a = np.random.default_rng(4).normal(size=(5, 4))
    base = spectral_norm(a)
    for c in (-3.0, 0.5, 7.0):
        assert spectral_norm(c * a) == pytest.approx(abs(c) * base, rel=1e-9)


def test_condition_number_of_diag_three_one() -> None:
    assert condition_number_2(np.diag([3.0, 1.0])) == pytest.approx(3.0, rel=1e-9)


def test_condition_number_is_at_least_one() -> None:
    rng = np.random.default_rng(5)
    for _ in range(20):
        n = int(rng.integers(1, 7))
        a = rng.normal(size=(n, n)) + 2 * np.eye(n)
        assert condition_number_2(a) >= 1.0 - 1e-12


def test_condition_number_matches_jacobi_on_spd() -> None:
    rng = np.random.default_rng(6)
    for n in (2, 4, 6):
        b = rng.normal(size=(n, n))
        a = b @ b.T + n * np.eye(n)
        s = jacobi_singular_values(a)
        assert condition_number_2(a) == pytest.approx(s[0] / s[-1], rel=1e-6)
