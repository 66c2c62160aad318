"""Preconditioned conjugate gradients with a relative-residual stop rule,
plus the dense direct solve used for coarse grids and as a test oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as sla

__all__ = ["SolveReport", "pcg", "direct_solve"]

HARD_ITER_CAP = 10000


@dataclass
class SolveReport:
    iterations: int = 0
    residual_history: list = field(default_factory=list)
    converged: bool = False
    final_relative_residual: float = np.inf
    wall_time: float = 0.0
    aborted: str = ""


def pcg(A, b, M=None, tol: float = 1e-10, x0=None, max_iter: int | None = None):
    """Conjugate gradients on an SPD operator, preconditioned by M.

    Stops when the true residual satisfies |b - A x| <= tol |b| in l2; the
    recurrence residual is re-anchored to the true residual every 50
    iterations.  Indefiniteness of A or M aborts with a diagnostic, since it
    signals a broken preconditioner.  Non-convergence is reported, not
    raised.
    """
    if tol <= 0:
        raise ValueError("tolerance must be positive")
    t0 = time.perf_counter()
    b = np.asarray(b, dtype=float)
    n = b.shape[0]
    if max_iter is None:
        max_iter = min(10 * n, HARD_ITER_CAP)
    matvec = A.dot if hasattr(A, "dot") else A
    precond = (lambda r: r.copy()) if M is None else \
        (M.apply if hasattr(M, "apply") else M)
    report = SolveReport()
    bnorm = float(np.linalg.norm(b))
    if bnorm == 0.0:
        report.converged = True
        report.final_relative_residual = 0.0
        report.residual_history = [0.0]
        report.wall_time = time.perf_counter() - t0
        return np.zeros(n), report

    x = np.zeros(n) if x0 is None else np.asarray(x0, dtype=float).copy()
    r = b - matvec(x)
    report.residual_history.append(float(np.linalg.norm(r)) / bnorm)
    if report.residual_history[0] <= tol:
        report.converged = True
        report.final_relative_residual = report.residual_history[0]
        report.wall_time = time.perf_counter() - t0
        return x, report
    z = precond(r)
    rz = float(r @ z)
    if rz <= 0:
        report.aborted = "preconditioner not positive definite"
        report.wall_time = time.perf_counter() - t0
        return x, report
    p = z.copy()
    for it in range(1, max_iter + 1):
        Ap = matvec(p)
        pAp = float(p @ Ap)
        if pAp <= 0:
            report.aborted = "matrix not positive definite"
            break
        alpha = rz / pAp
        x += alpha * p
        if it % 50 == 0:
            r = b - matvec(x)
        else:
            r -= alpha * Ap
        rel = float(np.linalg.norm(r)) / bnorm
        report.residual_history.append(rel)
        report.iterations = it
        if rel <= tol:
            true_rel = float(np.linalg.norm(b - matvec(x))) / bnorm
            report.residual_history[-1] = true_rel
            if true_rel <= tol:
                report.converged = True
                report.final_relative_residual = true_rel
                break
            r = b - matvec(x)
        z = precond(r)
        rz_new = float(r @ z)
        if rz_new <= 0:
            report.aborted = "preconditioner not positive definite"
            break
        p = z + (rz_new / rz) * p
        rz = rz_new
    if not report.converged:
        report.final_relative_residual = report.residual_history[-1]
    report.wall_time = time.perf_counter() - t0
    return x, report


def direct_solve(A, b) -> np.ndarray:
    """Dense symmetric positive definite solve (Cholesky)."""
    A = np.asarray(A, dtype=float) if not hasattr(A, "toarray") else A.toarray()
    try:
        c = sla.cho_factor(A, lower=True, check_finite=False)
    except np.linalg.LinAlgError as exc:
        raise ValueError("matrix is not symmetric positive definite") from exc
    x = sla.cho_solve(c, np.asarray(b, dtype=float), check_finite=False)
    return x
