"""
Sparse direct factorization: reuse, adjoint solves and failure modes
"""

import numpy as np
import pytest
import scipy.sparse as sps

from app.errors import DimensionMismatchError, SingularMatrixError
from app.monitoring import monitor
from app.sparse_direct import dump_coo, factorize, solve, solve_adjoint, solve_many


def _random_system(n: int = 30, seed: int = 3) -> sps.csc_matrix:
    rng = np.random.default_rng(seed)
    matrix = sps.random(n, n, density=0.15, random_state=seed, dtype=float)
    matrix = matrix + 1j * sps.random(n, n, density=0.15, random_state=seed + 1, dtype=float)
    return (matrix + sps.diags(5.0 + rng.random(n))).tocsc()


def test_solve_many_matches_dense():
    matrix = _random_system()
    rng = np.random.default_rng(0)
    rhs = rng.standard_normal((30, 4)) + 1j * rng.standard_normal((30, 4))
    factorization = factorize(matrix)
    np.testing.assert_allclose(solve_many(factorization, rhs), np.linalg.solve(matrix.toarray(), rhs), rtol=1e-10)
    assert monitor.factorizations == 1


def test_adjoint_solve_is_conjugate_transpose():
    matrix = _random_system()
    rng = np.random.default_rng(1)
    b = rng.standard_normal(30) + 1j * rng.standard_normal(30)
    c = rng.standard_normal(30) + 1j * rng.standard_normal(30)
    factorization = factorize(matrix)

    x = solve(factorization, b)
    y = solve_adjoint(factorization, c)
    assert np.isclose(np.vdot(c, x), np.vdot(y, b), rtol=1e-10)
    np.testing.assert_allclose(matrix.conj().T @ y, c, rtol=1e-10, atol=1e-12)


def test_hermitian_solves_agree():
    matrix = _random_system()
    hermitian = (matrix + matrix.conj().T).tocsc() + sps.identity(30, format="csc") * 10
    rhs = np.arange(30, dtype=complex)
    factorization = factorize(hermitian)
    np.testing.assert_allclose(solve(factorization, rhs), solve_adjoint(factorization, rhs), rtol=1e-10)


def test_many_solves_one_factorization():
    factorization = factorize(_random_system())
    for k in range(5):
        solve(factorization, np.full(30, k + 1.0))
        solve_adjoint(factorization, np.full(30, k + 1.0))
    assert monitor.factorizations == 1
    assert monitor.count("solves") == 5
    assert monitor.count("adjoint_solves") == 5


def test_zero_columns():
    factorization = factorize(_random_system())
    assert solve_many(factorization, np.zeros((30, 0))).shape == (30, 0)


def test_structurally_singular_matrix():
    matrix = sps.diags([1.0, 0.0, 2.0]).tocsc()
    matrix.eliminate_zeros()
    with pytest.raises(SingularMatrixError) as info:
        factorize(matrix)
    assert info.value.details["trace_dof"] == 1
    assert monitor.factorizations == 0


def test_numerically_singular_matrix():
    matrix = sps.csc_matrix(np.array([[1.0, 2.0], [2.0, 4.0]]))
    with pytest.raises(SingularMatrixError):
        factorize(matrix)


def test_shape_checks():
    with pytest.raises(DimensionMismatchError):
        factorize(sps.csc_matrix(np.ones((2, 3))))
    factorization = factorize(_random_system())
    with pytest.raises(DimensionMismatchError):
        solve(factorization, np.ones(29))


def test_statistics_report_fill():
    stats = factorize(_random_system()).statistics()
    assert stats["dimension"] == 30
    assert stats["nnz_factors"] >= stats["nnz_matrix"] > 0
    assert stats["memory_estimate_bytes"] == 20 * stats["nnz_factors"]


def test_dump_coo(tmp_path):
    matrix = sps.csc_matrix(np.array([[1.0 + 2.0j, 0.0], [0.0, 3.0]]))
    lines = dump_coo(matrix, tmp_path / "matrix.txt").read_text().splitlines()
    assert lines[0] == "% 2 2 2"
    assert lines[1] == "0 0 1 2"
    assert lines[2] == "1 1 3 0"
