import numpy as np
import pytest
import scipy.sparse as sp

from dpgmg.krylov import direct_solve, pcg


def test_identity_converges_in_one_iteration():
    A = sp.identity(12, format="csr")
    b = np.arange(1.0, 13.0)
    x, rep = pcg(A, b, tol=1e-12)
    assert rep.iterations == 1 and rep.converged
    assert np.allclose(x, b)
    assert len(rep.residual_history) == rep.iterations + 1
    assert rep.residual_history[-1] <= 1e-12


def test_exact_preconditioner_one_iteration():
    rng = np.random.default_rng(0)
    R = rng.normal(size=(20, 20))
    A = R @ R.T + 20 * np.eye(20)
    Ainv = np.linalg.inv(A)
    b = rng.normal(size=20)
    x, rep = pcg(sp.csr_matrix(A), b, M=lambda r: Ainv @ r, tol=1e-10)
    assert rep.iterations == 1 and rep.converged


def test_zero_rhs_returns_zero():
    A = sp.identity(5, format="csr")
    x, rep = pcg(A, np.zeros(5), tol=1e-10)
    assert rep.converged and np.all(x == 0)
    assert rep.final_relative_residual == 0.0


def test_satisfied_initial_guess_counts_zero_iterations():
    A = sp.identity(5, format="csr")
    b = np.ones(5)
    x, rep = pcg(A, b, x0=np.ones(5), tol=1e-10)
    assert rep.converged and rep.iterations == 0


def test_a_norm_monotone_decrease():
    rng = np.random.default_rng(1)
    R = rng.normal(size=(30, 30))
    A = R @ R.T + 30 * np.eye(30)
    b = rng.normal(size=30)
    xstar = np.linalg.solve(A, b)
    As = sp.csr_matrix(A)
    errs = []
    for iters in range(1, 12):
        x, rep = pcg(As, b, tol=1e-30, max_iter=iters)
        e = x - xstar
        errs.append(np.sqrt(e @ A @ e))
    assert all(a >= b - 1e-12 for a, b in zip(errs, errs[1:]))


def test_determinism_bit_identical():
    rng = np.random.default_rng(2)
    R = rng.normal(size=(40, 40))
    A = sp.csr_matrix(R @ R.T + 40 * np.eye(40))
    b = rng.normal(size=40)
    x1, r1 = pcg(A, b, tol=1e-10)
    x2, r2 = pcg(A, b, tol=1e-10)
    assert r1.iterations == r2.iterations
    assert np.array_equal(x1, x2)
    assert r1.residual_history == r2.residual_history


def test_indefinite_matrix_aborts_with_diagnostic():
    A = sp.csr_matrix(np.diag([1.0, -1.0]))
    b = np.array([1.0, 1.0])
    x, rep = pcg(A, b, tol=1e-10, max_iter=10)
    assert not rep.converged
    assert "not positive definite" in rep.aborted


def test_indefinite_preconditioner_aborts():
    A = sp.identity(3, format="csr")
    b = np.ones(3)
    x, rep = pcg(A, b, M=lambda r: -r, tol=1e-10)
    assert not rep.converged and "preconditioner" in rep.aborted


def test_nonconvergence_reported_not_raised():
    rng = np.random.default_rng(3)
    R = rng.normal(size=(50, 50))
    A = sp.csr_matrix(R @ R.T + 1e-6 * np.eye(50))
    b = rng.normal(size=50)
    x, rep = pcg(A, b, tol=1e-14, max_iter=2)
    assert not rep.converged
    assert rep.final_relative_residual > 0


def test_tolerance_validation():
    with pytest.raises(ValueError):
        pcg(sp.identity(2, format="csr"), np.ones(2), tol=0.0)


def test_direct_solve_examples():
    assert np.allclose(direct_solve(2 * np.eye(4), np.ones(4)), 0.5)
    assert np.allclose(direct_solve(np.array([[4.0]]), np.array([2.0])), [0.5])
    rng = np.random.default_rng(4)
    R = rng.normal(size=(50, 50))
    A = R.T @ R + np.eye(50)
    b = rng.normal(size=50)
    x = direct_solve(A, b)
    assert np.linalg.norm(A @ x - b) <= 1e-10 * np.linalg.norm(b)
    with pytest.raises(ValueError):
        direct_solve(np.diag([1.0, -1.0]), np.ones(2))
