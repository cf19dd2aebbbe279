"""Operator-splitting (ADMM) solver for convex quadratic programs.

Solves  min 1/2 x'Px + q'x  s.t.  l <= Ax <= u,  with equality constraints
encoded as rows with l == u. The splitting, over-relaxation, and adaptive
step-size rules follow the standard OSQP scheme.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sparse
import scipy.sparse.linalg as spla

EQ_TOL = 1e-9           # rows with u - l below this are treated as equalities
RHO_EQ_SCALE = 1e3
INFEAS_TOL = 1e-8


@dataclass
class QpProblem:
    P: sparse.csc_matrix
    q: np.ndarray
    A: sparse.csc_matrix
    l: np.ndarray
    u: np.ndarray
    x0: Optional[np.ndarray] = None
    y0: Optional[np.ndarray] = None

    def __post_init__(self):
        self.P = sparse.csc_matrix(self.P)
        self.A = sparse.csc_matrix(self.A)
        self.q = np.asarray(self.q, dtype=float).ravel()
        self.l = np.asarray(self.l, dtype=float).ravel()
        self.u = np.asarray(self.u, dtype=float).ravel()
        n = self.P.shape[0]
        if self.P.shape[1] != n or self.q.shape[0] != n:
            raise ValueError("P/q dimension mismatch")
        if self.A.shape[1] != n or self.A.shape[0] != self.l.shape[0] or self.l.shape[0] != self.u.shape[0]:
            raise ValueError("A/l/u dimension mismatch")
        if np.any(self.l > self.u + 1e-12):
            raise ValueError("lower bound exceeds upper bound")
        asym = abs(self.P - self.P.T).max() if self.P.nnz else 0.0
        if asym > 1e-8 * max(1.0, abs(self.P).max()):
            raise ValueError("P must be symmetric")
        _check_psd(self.P)

    @property
    def num_vars(self) -> int:
        return self.P.shape[0]

    @property
    def num_constraints(self) -> int:
        return self.A.shape[0]

    def objective(self, x: np.ndarray) -> float:
        return float(0.5 * x @ (self.P @ x) + self.q @ x)


def _check_psd(P: sparse.csc_matrix) -> None:
    """Validate positive semidefiniteness via Cholesky of a shifted copy."""
    n = P.shape[0]
    if n == 0:
        return
    scale = max(1.0, abs(P).max() if P.nnz else 0.0)
    if n > 500:
        # large structured problems: full factorization is too costly here,
        # settle for a nonnegative-diagonal sanity check
        if P.diagonal().min() < -1e-9 * scale:
            raise ValueError("P is not positive semidefinite")
        return
    dense = P.toarray()
    shift = 1e-9 * scale
    try:
        np.linalg.cholesky(dense + shift * np.eye(n))
    except np.linalg.LinAlgError:
        raise ValueError("P is not positive semidefinite") from None


@dataclass
class QpSolution:
    x: np.ndarray
    y: np.ndarray
    status: str                  # solved | max-iter | primal-infeasible | dual-infeasible
    iterations: int
    primal_residual: float
    dual_residual: float

    @property
    def solved(self) -> bool:
        return self.status == "solved"


def kkt_residuals(problem: QpProblem, x: np.ndarray, y: np.ndarray):
    """Infinity-norm primal and dual KKT residuals at (x, y)."""
    x = np.asarray(x, dtype=float)
    y = np.asarray(y, dtype=float)
    Ax = problem.A @ x
    z = np.clip(Ax, problem.l, problem.u)
    r_prim = np.linalg.norm(Ax - z, np.inf) if Ax.size else 0.0
    r_dual = np.linalg.norm(problem.P @ x + problem.q + problem.A.T @ y, np.inf)
    return float(r_prim), float(r_dual)


class AdmmSolver:
    """ADMM solver with a cached KKT factorization, reusable across re-solves
    that change only q, l, u (the MPC hot path)."""

    def __init__(self, P, A, rho: float = 0.1, sigma: float = 1e-6,
                 alpha: float = 1.6, adaptive_rho: bool = True,
                 eq_scale: float = RHO_EQ_SCALE):
        self.P = sparse.csc_matrix(P)
        self.A = sparse.csc_matrix(A)
        self.n = self.P.shape[0]
        self.m = self.A.shape[0]
        self.sigma = sigma
        self.alpha = alpha
        self.adaptive_rho = adaptive_rho
        self.rho_base = rho
        self.eq_scale = eq_scale
        self._eq_mask = None
        self._rho = None
        self._factor = None

    def _set_rho(self, rho_scalar: float, l: np.ndarray, u: np.ndarray) -> None:
        eq = (u - l) < EQ_TOL
        rho = np.full(self.m, rho_scalar)
        rho[eq] = rho_scalar * self.eq_scale
        self._rho = rho
        self._eq_mask = eq
        kkt = sparse.vstack([
            sparse.hstack([self.P + self.sigma * sparse.eye(self.n), self.A.T]),
            sparse.hstack([self.A, -sparse.diags(1.0 / rho)]),
        ]).tocsc()
        # minimum-degree on A^T+A: roughly half the triangular-solve cost of
        # COLAMD on these saddle-point systems
        self._factor = spla.splu(kkt, permc_spec="MMD_AT_PLUS_A")

    def solve(self, q, l, u, x0=None, y0=None, tol_abs: float = 1e-5,
              tol_rel: float = 1e-5, max_iter: int = 4000,
              check_interval: int = 25) -> QpSolution:
        q = np.asarray(q, dtype=float).ravel()
        l = np.asarray(l, dtype=float).ravel()
        u = np.asarray(u, dtype=float).ravel()
        if self._factor is None:
            self._set_rho(self.rho_base, l, u)
        rho = self._rho
        x = np.zeros(self.n) if x0 is None else np.array(x0, dtype=float)
        y = np.zeros(self.m) if y0 is None else np.array(y0, dtype=float)
        z = np.clip(self.A @ x, l, u)

        if self.m == 0:
            # unconstrained: single linear solve
            x = spla.spsolve(sparse.csc_matrix(self.P + 1e-12 * sparse.eye(self.n)), -q)
            return QpSolution(x, y, "solved", 1, 0.0,
                              float(np.linalg.norm(self.P @ x + q, np.inf)))

        status = "max-iter"
        iters = max_iter
        r_prim = r_dual = np.inf
        rhs = np.empty(self.n + self.m)
        for it in range(1, max_iter + 1):
            x_prev, z_prev, y_prev = x, z, y
            rhs[:self.n] = self.sigma * x - q
            rhs[self.n:] = z - y / rho
            sol = self._factor.solve(rhs)
            x_tilde = sol[:self.n]
            z_tilde = z + (sol[self.n:] - y) / rho
            x = self.alpha * x_tilde + (1 - self.alpha) * x_prev
            z_relax = self.alpha * z_tilde + (1 - self.alpha) * z_prev
            z = np.clip(z_relax + y / rho, l, u)
            y = y + rho * (z_relax - z)

            if it % check_interval == 0 or it == max_iter:
                Ax = self.A @ x
                Px = self.P @ x
                ATy = self.A.T @ y
                r_prim = np.linalg.norm(Ax - z, np.inf)
                r_dual = np.linalg.norm(Px + q + ATy, np.inf)
                eps_prim = tol_abs + tol_rel * max(
                    np.linalg.norm(Ax, np.inf), np.linalg.norm(z, np.inf))
                eps_dual = tol_abs + tol_rel * max(
                    np.linalg.norm(Px, np.inf), np.linalg.norm(ATy, np.inf),
                    np.linalg.norm(q, np.inf))
                if r_prim <= eps_prim and r_dual <= eps_dual:
                    status, iters = "solved", it
                    break
                dy = y - y_prev
                dx = x - x_prev
                if self._primal_infeasible(dy, l, u):
                    status, iters = "primal-infeasible", it
                    break
                if self._dual_infeasible(dx, q, l, u):
                    status, iters = "dual-infeasible", it
                    break
                if self.adaptive_rho and it % (check_interval * 8) == 0:
                    num = r_prim / max(np.linalg.norm(Ax, np.inf),
                                       np.linalg.norm(z, np.inf), 1e-12)
                    den = r_dual / max(np.linalg.norm(Px, np.inf),
                                       np.linalg.norm(ATy, np.inf),
                                       np.linalg.norm(q, np.inf), 1e-12)
                    ratio = np.sqrt(num / max(den, 1e-16))
                    if ratio > 5.0 or ratio < 0.2:
                        new_rho = float(np.clip(self._rho[~self._eq_mask][0] * ratio
                                                if np.any(~self._eq_mask)
                                                else self._rho[0] * ratio, 1e-6, 1e6))
                        self._set_rho(new_rho, l, u)
                        rho = self._rho

        return QpSolution(x, y, status, iters, float(r_prim), float(r_dual))

    def _primal_infeasible(self, dy: np.ndarray, l: np.ndarray, u: np.ndarray) -> bool:
        norm_dy = np.linalg.norm(dy, np.inf)
        if norm_dy < 1e-12:
            return False
        dy = dy / norm_dy
        if np.linalg.norm(self.A.T @ dy, np.inf) > INFEAS_TOL:
            return False
        dy_pos = np.maximum(dy, 0.0)
        dy_neg = np.minimum(dy, 0.0)
        # infinite bounds can only pair with vanishing multiplier components
        if np.any(np.isinf(u) & (dy_pos > INFEAS_TOL)):
            return False
        if np.any(np.isinf(l) & (dy_neg < -INFEAS_TOL)):
            return False
        support = float(np.sum(u[np.isfinite(u)] * dy_pos[np.isfinite(u)])
                        + np.sum(l[np.isfinite(l)] * dy_neg[np.isfinite(l)]))
        return support < -INFEAS_TOL

    def _dual_infeasible(self, dx: np.ndarray, q: np.ndarray,
                         l: np.ndarray, u: np.ndarray) -> bool:
        norm_dx = np.linalg.norm(dx, np.inf)
        if norm_dx < 1e-12:
            return False
        dx = dx / norm_dx
        if np.linalg.norm(self.P @ dx, np.inf) > INFEAS_TOL:
            return False
        if q @ dx > -INFEAS_TOL:
            return False
        Adx = self.A @ dx
        upper_ok = np.isinf(u) | (Adx <= INFEAS_TOL)
        lower_ok = np.isinf(l) | (Adx >= -INFEAS_TOL)
        return bool(np.all(upper_ok & lower_ok))


def solve_qp(problem: QpProblem, tol_abs: float = 1e-5, tol_rel: float = 1e-5,
             max_iter: int = 4000, rho: float = 0.1,
             adaptive_rho: bool = True,
             rho_eq_scale: float = RHO_EQ_SCALE) -> QpSolution:
    """One-shot solve of a QpProblem, honoring its warm start when present."""
    solver = AdmmSolver(problem.P, problem.A, rho=rho, adaptive_rho=adaptive_rho,
                        eq_scale=rho_eq_scale)
    return solver.solve(problem.q, problem.l, problem.u,
                        x0=problem.x0, y0=problem.y0,
                        tol_abs=tol_abs, tol_rel=tol_rel, max_iter=max_iter)
