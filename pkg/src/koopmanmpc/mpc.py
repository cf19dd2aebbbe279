"""Linear MPC, SQP-based NMPC, and the bilinear-Koopman NMPC variant.

All subproblems share one stacked QP layout over (z_0..z_N, u_0..u_{N-1}):
dynamics equalities, an initial-condition equality, box constraints on the
projected physical state and on the inputs, and an optional terminal state
equality. The SQP path solves the same layout in delta coordinates around the
current guess with a Gauss-Newton Hessian.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field, replace
from typing import Callable, List, Optional, Sequence

import numpy as np
import scipy.sparse as sparse

from .estimators import KoopmanBilinearModel, LinearModel
from .plants import ControlAffinePlant, IntegrationError, Trajectory, discrete_jacobians, discrete_step
from .qp import RHO_EQ_SCALE, AdmmSolver, QpProblem, QpSolution, solve_qp


@dataclass
class MpcConfig:
    """Horizon, weights, and box constraints; weights act on the physical state."""

    horizon: int
    dt: float
    Q: np.ndarray
    R: np.ndarray
    QN: Optional[np.ndarray] = None
    state_lower: Optional[np.ndarray] = None
    state_upper: Optional[np.ndarray] = None
    input_lower: Optional[np.ndarray] = None
    input_upper: Optional[np.ndarray] = None
    terminal_state: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.horizon < 1:
            raise ValueError("horizon must be at least 1")
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        self.QN = self.Q if self.QN is None else np.atleast_2d(np.asarray(self.QN, dtype=float))
        d = self.Q.shape[0]
        m = self.R.shape[0]
        self.state_lower = (np.full(d, -np.inf) if self.state_lower is None
                            else np.asarray(self.state_lower, dtype=float))
        self.state_upper = (np.full(d, np.inf) if self.state_upper is None
                            else np.asarray(self.state_upper, dtype=float))
        self.input_lower = (np.full(m, -np.inf) if self.input_lower is None
                            else np.asarray(self.input_lower, dtype=float))
        self.input_upper = (np.full(m, np.inf) if self.input_upper is None
                            else np.asarray(self.input_upper, dtype=float))
        if np.any(self.state_lower > self.state_upper) or np.any(self.input_lower > self.input_upper):
            raise ValueError("inconsistent box constraints")
        if self.terminal_state is not None:
            self.terminal_state = np.asarray(self.terminal_state, dtype=float)


@dataclass
class StageLinearization:
    """Per-stage affine dynamics approximation dz+ = A dz + B du + r."""

    A: np.ndarray
    B: np.ndarray
    r: np.ndarray


def koopman_linearize(model: KoopmanBilinearModel, z_bar: np.ndarray,
                      u_bar: np.ndarray, z_bar_next: np.ndarray) -> StageLinearization:
    """Closed-form linearization of the bilinear step map along a guess."""
    A = model.F.copy()
    for l, G_l in enumerate(model.G):
        A += G_l * u_bar[l]
    B = np.column_stack([G_l @ z_bar for G_l in model.G])
    r = A @ z_bar - np.asarray(z_bar_next, dtype=float)
    return StageLinearization(A=A, B=B, r=r)


def nmpc_linearize(plant: ControlAffinePlant, x_bar: np.ndarray, u_bar: np.ndarray,
                   x_bar_next: np.ndarray, dt: float, substeps: int = 1) -> StageLinearization:
    """Linearization of the RK4-ZOH discrete map via chain-rule sensitivities."""
    A, B, x_next = discrete_jacobians(plant, x_bar, u_bar, dt, substeps)
    return StageLinearization(A=A, B=B, r=x_next - np.asarray(x_bar_next, dtype=float))


@dataclass
class QpLayout:
    n: int
    m: int
    N: int

    @property
    def num_vars(self) -> int:
        return (self.N + 1) * self.n + self.N * self.m

    def split(self, x: np.ndarray):
        N, n, m = self.N, self.n, self.m
        Z = x[:(N + 1) * n].reshape(N + 1, n)
        U = x[(N + 1) * n:].reshape(N, m)
        return Z, U


def _box_rows(lower: np.ndarray, upper: np.ndarray) -> np.ndarray:
    return np.where(np.isfinite(lower) | np.isfinite(upper))[0]


def _assemble_qp(A_list: Sequence[np.ndarray], B_list: Sequence[np.ndarray],
                 dyn_rhs: Sequence[np.ndarray], init_rhs: np.ndarray,
                 Cx: np.ndarray, cfg: MpcConfig, q: np.ndarray,
                 state_low: np.ndarray, state_high: np.ndarray,
                 input_low: np.ndarray, input_high: np.ndarray,
                 terminal_rhs: Optional[np.ndarray]) -> QpProblem:
    """Stacked sparse QP shared by the linear-MPC and SQP paths."""
    N = cfg.horizon
    n = A_list[0].shape[0]
    m = B_list[0].shape[1]
    d = Cx.shape[0]
    layout = QpLayout(n=n, m=m, N=N)
    nv = layout.num_vars
    u_off = (N + 1) * n

    # quadratic cost blocks in lifted coordinates
    Qz = Cx.T @ cfg.Q @ Cx
    QzN = Cx.T @ cfg.QN @ Cx
    P = sparse.block_diag([Qz] * N + [QzN] + [cfg.R] * N, format="csc")

    rows, cols, data = [], [], []
    l_parts, u_parts = [], []
    row = 0

    # initial-condition equality
    idx = np.arange(n)
    rows.append(row + idx)
    cols.append(idx)
    data.append(np.ones(n))
    l_parts.append(init_rhs)
    u_parts.append(init_rhs)
    row += n

    # dynamics equalities: A_k z_k + B_k u_k - z_{k+1} = -rhs_k
    rA_i, cA_i = np.divmod(np.arange(n * n), n)
    rB_i, cB_i = np.divmod(np.arange(n * m), m)
    for k in range(N):
        rows.append(row + rA_i)
        cols.append(k * n + cA_i)
        data.append(np.asarray(A_list[k], dtype=float).ravel())
        rows.append(row + rB_i)
        cols.append(u_off + k * m + cB_i)
        data.append(np.asarray(B_list[k], dtype=float).ravel())
        rows.append(row + idx)
        cols.append((k + 1) * n + idx)
        data.append(-np.ones(n))
        rhs = -np.asarray(dyn_rhs[k], dtype=float)
        l_parts.append(rhs)
        u_parts.append(rhs)
        row += n

    # state boxes on the projected physical state
    box = _box_rows(cfg.state_lower, cfg.state_upper)
    if box.size:
        Cb = Cx[box]
        rC_i, cC_i = np.divmod(np.arange(box.size * n), n)
        for k in range(N + 1):
            rows.append(row + rC_i)
            cols.append(k * n + cC_i)
            data.append(Cb.ravel())
            l_parts.append(state_low[k][box])
            u_parts.append(state_high[k][box])
            row += box.size

    # input boxes
    ibox = _box_rows(cfg.input_lower, cfg.input_upper)
    if ibox.size:
        for k in range(N):
            rows.append(row + np.arange(ibox.size))
            cols.append(u_off + k * m + ibox)
            data.append(np.ones(ibox.size))
            l_parts.append(input_low[k][ibox])
            u_parts.append(input_high[k][ibox])
            row += ibox.size

    # terminal equality on the physical terminal state
    if terminal_rhs is not None:
        rT_i, cT_i = np.divmod(np.arange(d * n), n)
        rows.append(row + rT_i)
        cols.append(N * n + cT_i)
        data.append(Cx.ravel())
        l_parts.append(terminal_rhs)
        u_parts.append(terminal_rhs)
        row += d

    A = sparse.coo_matrix(
        (np.concatenate(data), (np.concatenate(rows), np.concatenate(cols))),
        shape=(row, nv)).tocsc()
    return QpProblem(P=P, q=q, A=A,
                     l=np.concatenate(l_parts), u=np.concatenate(u_parts))


def _reference_arrays(cfg: MpcConfig, d: int, m: int, x_ref, u_ref):
    N = cfg.horizon
    if x_ref is None:
        x_ref = np.zeros((N + 1, d))
    else:
        x_ref = np.atleast_2d(np.asarray(x_ref, dtype=float))
        if x_ref.shape[0] == 1:
            x_ref = np.repeat(x_ref, N + 1, axis=0)
    if u_ref is None:
        u_ref = np.zeros((N, m))
    else:
        u_ref = np.atleast_2d(np.asarray(u_ref, dtype=float))
        if u_ref.shape[0] == 1:
            u_ref = np.repeat(u_ref, N, axis=0)
    return x_ref, u_ref


def _tracking_q(cfg: MpcConfig, Cx: np.ndarray, x_ref: np.ndarray, u_ref: np.ndarray,
                z_init: Optional[np.ndarray] = None,
                u_init: Optional[np.ndarray] = None) -> np.ndarray:
    """Linear cost term; with a guess supplied this is the Gauss-Newton gradient."""
    N = cfg.horizon
    n = Cx.shape[1]
    m = cfg.R.shape[0]
    q = np.empty((N + 1) * n + N * m)
    CQ = Cx.T @ cfg.Q
    CQN = Cx.T @ cfg.QN
    for k in range(N + 1):
        W = CQN if k == N else CQ
        err = -x_ref[k]
        if z_init is not None:
            err = Cx @ z_init[k] - x_ref[k]
        q[k * n:(k + 1) * n] = W @ err
    u_off = (N + 1) * n
    for k in range(N):
        err = -u_ref[k]
        if u_init is not None:
            err = u_init[k] - u_ref[k]
        q[u_off + k * m:u_off + (k + 1) * m] = cfg.R @ err
    return q


def build_linear_mpc_qp(model: LinearModel, x_hat: np.ndarray, cfg: MpcConfig,
                        x_ref=None, u_ref=None) -> QpProblem:
    """Dense-horizon QP for a (lifted) linear model from the current state."""
    n = model.lifted_dim
    m = model.input_dim
    d = model.Cx.shape[0]
    N = cfg.horizon
    x_ref, u_ref = _reference_arrays(cfg, d, m, x_ref, u_ref)
    z_hat = model.lift(np.asarray(x_hat, dtype=float))
    q = _tracking_q(cfg, model.Cx, x_ref, u_ref)
    state_low = np.repeat(cfg.state_lower[None, :], N + 1, axis=0)
    state_high = np.repeat(cfg.state_upper[None, :], N + 1, axis=0)
    input_low = np.repeat(cfg.input_lower[None, :], N, axis=0)
    input_high = np.repeat(cfg.input_upper[None, :], N, axis=0)
    terminal = cfg.terminal_state
    return _assemble_qp([model.A] * N, [model.B] * N, [model.offset] * N,
                        z_hat, model.Cx, cfg, q,
                        state_low, state_high, input_low, input_high, terminal)


@dataclass
class SqpWorkspace:
    """Initial guess, references, and the previous QP solution for warm starts.

    `x_init` lives in the model's (possibly lifted) coordinates; references are
    physical."""

    x_init: np.ndarray       # (N+1, n)
    u_init: np.ndarray       # (N, m)
    x_ref: np.ndarray        # (N+1, d)
    u_ref: np.ndarray        # (N, m)
    qp_y: Optional[np.ndarray] = None


def build_sqp_qp(stages: Sequence[StageLinearization], z_hat: np.ndarray,
                 workspace: SqpWorkspace, cfg: MpcConfig, Cx: np.ndarray) -> QpProblem:
    """QP in delta coordinates around the workspace guess (Gauss-Newton Hessian)."""
    N = cfg.horizon
    if len(stages) != N:
        raise ValueError(f"expected {N} stage linearizations, got {len(stages)}")
    n = Cx.shape[1]
    x_init, u_init = workspace.x_init, workspace.u_init
    q = _tracking_q(cfg, Cx, workspace.x_ref, workspace.u_ref,
                    z_init=x_init, u_init=u_init)
    phys = x_init @ Cx.T
    state_low = cfg.state_lower[None, :] - phys
    state_high = cfg.state_upper[None, :] - phys
    input_low = cfg.input_lower[None, :] - u_init
    input_high = cfg.input_upper[None, :] - u_init
    terminal = None
    if cfg.terminal_state is not None:
        terminal = cfg.terminal_state - Cx @ x_init[-1]
    init_rhs = np.asarray(z_hat, dtype=float) - x_init[0]
    return _assemble_qp([s.A for s in stages], [s.B for s in stages],
                        [s.r for s in stages], init_rhs, Cx, cfg, q,
                        state_low, state_high, input_low, input_high, terminal)


class DynamicsAdapter:
    """Uniform interface over a bilinear model or the true plant's discrete map."""

    n: int
    m: int
    Cx: np.ndarray
    dt: float

    def lift(self, x: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def step(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def linearize(self, z: np.ndarray, u: np.ndarray, z_next: np.ndarray) -> StageLinearization:
        raise NotImplementedError


class BilinearDynamics(DynamicsAdapter):
    def __init__(self, model: KoopmanBilinearModel):
        self.model = model
        self.n = model.lifted_dim
        self.m = model.input_dim
        self.Cx = model.Cx
        self.dt = model.dt

    def lift(self, x):
        return self.model.lift(x)

    def step(self, z, u):
        return self.model.step(z, u)

    def linearize(self, z, u, z_next):
        return koopman_linearize(self.model, z, u, z_next)


class PlantDynamics(DynamicsAdapter):
    def __init__(self, plant: ControlAffinePlant, dt: float, substeps: int = 1):
        self.plant = plant
        self.n = plant.state_dim
        self.m = plant.input_dim
        self.Cx = np.eye(plant.state_dim)
        self.dt = dt
        self.substeps = substeps

    def lift(self, x):
        return np.asarray(x, dtype=float)

    def step(self, z, u):
        return discrete_step(self.plant, z, u, self.dt, self.substeps)

    def linearize(self, z, u, z_next):
        return nmpc_linearize(self.plant, z, u, z_next, self.dt, self.substeps)


@dataclass
class SqpResult:
    x: np.ndarray            # (N+1, n) converged guess in model coordinates
    u: np.ndarray            # (N, m)
    iterations: int
    status: str              # converged | max-iter | qp-failure | diverged
    step_norm: float


def _nlp_objective(cfg: MpcConfig, Cx: np.ndarray, ws: SqpWorkspace) -> float:
    phys = ws.x_init @ Cx.T
    err_x = phys - ws.x_ref
    err_u = ws.u_init - ws.u_ref
    cost = 0.0
    for k in range(cfg.horizon):
        cost += 0.5 * err_x[k] @ cfg.Q @ err_x[k] + 0.5 * err_u[k] @ cfg.R @ err_u[k]
    cost += 0.5 * err_x[-1] @ cfg.QN @ err_x[-1]
    return float(cost)


def sqp_solve(adapter: DynamicsAdapter, x_hat: np.ndarray, workspace: SqpWorkspace,
              cfg: MpcConfig, tol: float = 1e-4, max_iter: int = 100,
              qp_tol: float = 1e-5, qp_max_iter: int = 4000,
              qp_rho: float = 10.0,
              qp_rho_eq_scale: float = RHO_EQ_SCALE) -> SqpResult:
    """Full-step SQP: linearize along the guess, solve the QP, take the Newton step."""
    z_hat = adapter.lift(np.asarray(x_hat, dtype=float))
    N = cfg.horizon
    status = "max-iter"
    step_norm = np.inf
    obj_history: List[float] = []
    it = 0
    for it in range(1, max_iter + 1):
        stages = [adapter.linearize(workspace.x_init[k], workspace.u_init[k],
                                    workspace.x_init[k + 1]) for k in range(N)]
        qp = build_sqp_qp(stages, z_hat, workspace, cfg, adapter.Cx)
        qp.y0 = workspace.qp_y
        # inexact intermediate iterations: solve each QP to ~1% of the current
        # Newton-step size (capped), so large early steps get coarse cheap
        # solves. Single-iteration (real-time) calls and the final iterations
        # stay at the requested tolerance; convergence is only ever declared
        # from a tight-tolerance iteration.
        coarse_cap = max(1e-3, qp_tol)
        if max_iter == 1:
            tol_i = qp_tol
        elif not np.isfinite(step_norm):
            tol_i = coarse_cap
        else:
            tol_i = float(np.clip(step_norm * 1e-2, qp_tol, coarse_cap))
        tight = tol_i <= qp_tol * (1.0 + 1e-12)
        sol = solve_qp(qp, tol_abs=tol_i, tol_rel=tol_i, max_iter=qp_max_iter,
                       rho=qp_rho, adaptive_rho=False,
                       rho_eq_scale=qp_rho_eq_scale)
        if sol.status in ("primal-infeasible", "dual-infeasible"):
            status = "qp-failure"
            break
        layout = QpLayout(n=adapter.n, m=adapter.m, N=N)
        dZ, dU = layout.split(sol.x)
        workspace.x_init = workspace.x_init + dZ
        workspace.u_init = workspace.u_init + dU
        workspace.qp_y = sol.y
        step_norm = max(np.abs(dZ).max(), np.abs(dU).max())
        obj = _nlp_objective(cfg, adapter.Cx, workspace)
        obj_history.append(obj)
        if len(obj_history) > 5 and obj > 10.0 * min(obj_history[-6:-1]) + 1e-9:
            status = "diverged"
            break
        if step_norm < tol and tight:
            status = "converged"
            break
    return SqpResult(x=workspace.x_init, u=workspace.u_init,
                     iterations=it, status=status, step_norm=float(step_norm))


def shift_warm_start(workspace: SqpWorkspace, step_fn: Callable[[np.ndarray, np.ndarray], np.ndarray]) -> SqpWorkspace:
    """Advance the guess one interval: duplicate the last input, propagate the
    final state through the dynamics model."""
    x, u = workspace.x_init, workspace.u_init
    N = u.shape[0]
    u_new = np.vstack([u[1:], u[-1:]])
    x_new = np.vstack([x[1:], step_fn(x[-1], u_new[-1])[None, :]])
    return SqpWorkspace(x_init=x_new, u_init=u_new,
                        x_ref=workspace.x_ref, u_ref=workspace.u_ref,
                        qp_y=None)


def knmpc_step(model: KoopmanBilinearModel, x_hat: np.ndarray,
               workspace: SqpWorkspace, cfg: MpcConfig,
               qp_tol: float = 1e-5, qp_max_iter: int = 4000,
               qp_rho: float = 10.0):
    """One real-time iteration of Koopman NMPC.

    Exactly one QP solve; on QP failure the previous first input is held and
    the workspace left unshifted. Returns (u0, workspace, solved_flag).
    """
    adapter = BilinearDynamics(model)
    z_hat = adapter.lift(np.asarray(x_hat, dtype=float))
    N = cfg.horizon
    stages = [adapter.linearize(workspace.x_init[k], workspace.u_init[k],
                                workspace.x_init[k + 1]) for k in range(N)]
    qp = build_sqp_qp(stages, z_hat, workspace, cfg, adapter.Cx)
    qp.y0 = workspace.qp_y
    sol = solve_qp(qp, tol_abs=qp_tol, tol_rel=qp_tol, max_iter=qp_max_iter,
                   rho=qp_rho, adaptive_rho=False)
    if sol.status in ("primal-infeasible", "dual-infeasible"):
        return workspace.u_init[0].copy(), workspace, False
    layout = QpLayout(n=adapter.n, m=adapter.m, N=N)
    dZ, dU = layout.split(sol.x)
    solution = SqpWorkspace(x_init=workspace.x_init + dZ,
                            u_init=workspace.u_init + dU,
                            x_ref=workspace.x_ref, u_ref=workspace.u_ref,
                            qp_y=sol.y)
    u0 = solution.u_init[0].copy()
    shifted = shift_warm_start(solution, adapter.step)
    shifted.qp_y = sol.y
    return u0, shifted, True


@dataclass
class ClosedLoopTrace:
    dt: float
    states: np.ndarray       # (K+1, d)
    inputs: np.ndarray       # (K, m)
    solve_ms: np.ndarray     # (K,)
    stage_cost: np.ndarray   # (K,)
    truncated: bool = False

    @property
    def realized_cost(self) -> float:
        return float(np.sum(self.stage_cost))

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        m = self.inputs.shape[1]
        header = (["t"] + [f"x{i}" for i in range(d)] + [f"u{i}" for i in range(m)]
                  + ["solve_ms", "stage_cost"])
        lines = [",".join(header)]
        K = self.inputs.shape[0]
        for k in range(self.states.shape[0]):
            cells = [f"{k * self.dt:.17g}"] + [f"{v:.17g}" for v in self.states[k]]
            if k < K:
                cells += [f"{v:.17g}" for v in self.inputs[k]]
                cells += [f"{self.solve_ms[k]:.6g}", f"{self.stage_cost[k]:.17g}"]
            else:
                cells += [""] * (m + 2)
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")


class LinearMpcController:
    """Receding-horizon controller for (lifted) linear models.

    The constraint matrix and cost Hessian are fixed, so one factorization is
    reused across the whole run; only q, l, u change per step.
    """

    def __init__(self, model: LinearModel, cfg: MpcConfig,
                 x_ref_full: np.ndarray, u_ref_full: np.ndarray,
                 qp_tol: float = 1e-5, qp_max_iter: int = 4000,
                 qp_rho: float = 10.0):
        self.model = model
        self.cfg = cfg
        self.x_ref_full = np.atleast_2d(x_ref_full)
        self.u_ref_full = np.atleast_2d(u_ref_full)
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        template = build_linear_mpc_qp(model, np.zeros(model.Cx.shape[0]), cfg,
                                       self._ref_window(0)[0], self._ref_window(0)[1])
        self._template = template
        self._solver = AdmmSolver(template.P, template.A, rho=qp_rho,
                                  adaptive_rho=False)
        self._layout = QpLayout(n=model.lifted_dim, m=model.input_dim, N=cfg.horizon)
        self._x_prev = None
        self._y_prev = None
        self.last_plan = None

    def _ref_window(self, k: int):
        N = self.cfg.horizon
        idx = np.minimum(np.arange(k, k + N + 1), self.x_ref_full.shape[0] - 1)
        x_ref = self.x_ref_full[idx]
        idx_u = np.minimum(np.arange(k, k + N), self.u_ref_full.shape[0] - 1)
        u_ref = self.u_ref_full[idx_u]
        return x_ref, u_ref

    def step(self, x_hat: np.ndarray, k: int) -> np.ndarray:
        x_ref, u_ref = self._ref_window(k)
        q = _tracking_q(self.cfg, self.model.Cx, x_ref, u_ref)
        z_hat = self.model.lift(np.asarray(x_hat, dtype=float))
        l = self._template.l.copy()
        u = self._template.u.copy()
        n = self.model.lifted_dim
        l[:n] = z_hat
        u[:n] = z_hat
        sol = self._solver.solve(q, l, u, x0=self._x_prev, y0=self._y_prev,
                                 tol_abs=self.qp_tol, tol_rel=self.qp_tol,
                                 max_iter=self.qp_max_iter)
        if sol.status in ("primal-infeasible", "dual-infeasible"):
            if self.last_plan is not None:
                return self.last_plan[1][0].copy()
            return np.clip(np.zeros(self.model.input_dim),
                           self.cfg.input_lower, self.cfg.input_upper)
        self._x_prev, self._y_prev = sol.x, sol.y
        Z, U = self._layout.split(sol.x)
        self.last_plan = (Z, U)
        return np.clip(U[0], self.cfg.input_lower, self.cfg.input_upper)


class SqpMpcController:
    """Real-time-iteration NMPC: initialized by a converged SQP solve, then a
    single SQP iteration plus warm-start shift per control step."""

    def __init__(self, adapter: DynamicsAdapter, cfg: MpcConfig,
                 x_ref_full: np.ndarray, u_ref_full: np.ndarray,
                 sqp_tol: float = 1e-4, sqp_max_iter: int = 100,
                 qp_tol: float = 1e-5, qp_max_iter: int = 4000,
                 qp_rho: float = 10.0):
        self.adapter = adapter
        self.cfg = cfg
        self.x_ref_full = np.atleast_2d(x_ref_full)
        self.u_ref_full = np.atleast_2d(u_ref_full)
        self.sqp_tol = sqp_tol
        self.sqp_max_iter = sqp_max_iter
        self.qp_tol = qp_tol
        self.qp_max_iter = qp_max_iter
        self.qp_rho = qp_rho
        self.workspace: Optional[SqpWorkspace] = None
        self.init_iterations = 0
        self.hold_count = 0

    def _ref_window(self, k: int):
        N = self.cfg.horizon
        idx = np.minimum(np.arange(k, k + N + 1), self.x_ref_full.shape[0] - 1)
        idx_u = np.minimum(np.arange(k, k + N), self.u_ref_full.shape[0] - 1)
        return self.x_ref_full[idx], self.u_ref_full[idx_u]

    def initialize(self, x0: np.ndarray, u_guess: Optional[np.ndarray] = None) -> SqpResult:
        N = self.cfg.horizon
        z0 = self.adapter.lift(np.asarray(x0, dtype=float))
        x_ref, u_ref = self._ref_window(0)
        if u_guess is None:
            u_guess = u_ref.copy()
        x_init = np.repeat(z0[None, :], N + 1, axis=0)
        ws = SqpWorkspace(x_init=x_init, u_init=np.array(u_guess, dtype=float),
                          x_ref=x_ref, u_ref=u_ref)
        result = sqp_solve(self.adapter, x0, ws, self.cfg,
                           tol=self.sqp_tol, max_iter=self.sqp_max_iter,
                           qp_tol=self.qp_tol, qp_max_iter=self.qp_max_iter,
                           qp_rho=self.qp_rho)
        self.workspace = ws
        self.init_iterations = result.iterations
        return result

    def step(self, x_hat: np.ndarray, k: int) -> np.ndarray:
        if self.workspace is None:
            self.initialize(x_hat)
        ws = self.workspace
        ws.x_ref, ws.u_ref = self._ref_window(k)
        z_hat = self.adapter.lift(np.asarray(x_hat, dtype=float))
        N = self.cfg.horizon
        stages = [self.adapter.linearize(ws.x_init[j], ws.u_init[j], ws.x_init[j + 1])
                  for j in range(N)]
        qp = build_sqp_qp(stages, z_hat, ws, self.cfg, self.adapter.Cx)
        qp.y0 = ws.qp_y
        sol = solve_qp(qp, tol_abs=self.qp_tol, tol_rel=self.qp_tol,
                       max_iter=self.qp_max_iter, rho=self.qp_rho,
                       adaptive_rho=False)
        if sol.status in ("primal-infeasible", "dual-infeasible"):
            self.hold_count += 1
            return np.clip(ws.u_init[0],
                           self.cfg.input_lower, self.cfg.input_upper)
        layout = QpLayout(n=self.adapter.n, m=self.adapter.m, N=N)
        dZ, dU = layout.split(sol.x)
        solution = SqpWorkspace(x_init=ws.x_init + dZ, u_init=ws.u_init + dU,
                                x_ref=ws.x_ref, u_ref=ws.u_ref, qp_y=sol.y)
        u0 = np.clip(solution.u_init[0],
                     self.cfg.input_lower, self.cfg.input_upper)
        self.workspace = shift_warm_start(solution, self.adapter.step)
        self.workspace.qp_y = sol.y
        return u0


def closed_loop_run(plant: ControlAffinePlant, controller, x0: np.ndarray,
                    duration: float, dt: float, cfg: MpcConfig,
                    x_ref_full: np.ndarray, u_ref_full: np.ndarray,
                    substeps: int = 10) -> ClosedLoopTrace:
    """Alternate controller steps and ZOH plant simulation; record cost and timing."""
    K = int(round(duration / dt))
    d = plant.state_dim
    m = plant.input_dim
    x_ref_full = np.atleast_2d(x_ref_full)
    u_ref_full = np.atleast_2d(u_ref_full)
    X = np.empty((K + 1, d))
    U = np.empty((K, m))
    solve_ms = np.empty(K)
    stage_cost = np.empty(K)
    X[0] = np.asarray(x0, dtype=float)
    truncated = False
    for k in range(K):
        t0 = time.perf_counter()
        u = controller.step(X[k], k)
        solve_ms[k] = (time.perf_counter() - t0) * 1e3
        U[k] = u
        xr = x_ref_full[min(k, x_ref_full.shape[0] - 1)]
        ur = u_ref_full[min(k, u_ref_full.shape[0] - 1)]
        ex = X[k] - xr
        eu = u - ur
        stage_cost[k] = float(ex @ cfg.Q @ ex + eu @ cfg.R @ eu)
        try:
            X[k + 1] = discrete_step(plant, X[k], u, dt, substeps)
        except IntegrationError:
            truncated = True
            K = k + 1
            X = X[:K + 1]
            U = U[:K]
            solve_ms = solve_ms[:K]
            stage_cost = stage_cost[:K]
            break
        if np.linalg.norm(X[k + 1]) > 1e3:
            truncated = True
            K = k + 1
            X = X[:K + 1]
            U = U[:K]
            solve_ms = solve_ms[:K]
            stage_cost = stage_cost[:K]
            break
    return ClosedLoopTrace(dt=dt, states=X, inputs=U, solve_ms=solve_ms,
                           stage_cost=stage_cost, truncated=truncated)
