"""Nominal LQR, reference generation, excitation, and dataset assembly."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import List, Optional, Sequence, Tuple

import numpy as np
from scipy.optimize import linprog

from .estimators import LinearModel
from .lifting import identity_dictionary
from .mpc import MpcConfig, QpLayout, build_linear_mpc_qp
from .plants import (ControlAffinePlant, IntegrationError, QuadrotorParams,
                     Trajectory, linearize_continuous, simulate_zoh, zoh_discretize)
from .qp import solve_qp

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e3


class RiccatiError(RuntimeError):
    def __init__(self, residual: float):
        super().__init__(f"Riccati fixed-point iteration did not converge "
                         f"(final residual {residual:.3e})")
        self.residual = residual


def dare_solve(A: np.ndarray, B: np.ndarray, Q: np.ndarray, R: np.ndarray,
               tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    """Discrete algebraic Riccati equation by fixed-point iteration."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        BtP = B.T @ P
        K = np.linalg.solve(R + BtP @ B, BtP @ A)
        P_next = Q + A.T @ P @ (A - B @ K)
        residual = np.abs(P_next - P).max()
        P = 0.5 * (P_next + P_next.T)
        if residual < tol:
            return P
    raise RiccatiError(residual)


def lqr_gain(A_d: np.ndarray, B_d: np.ndarray, Q: np.ndarray, R: np.ndarray,
             tol: float = 1e-10, max_iter: int = 10000) -> np.ndarray:
    """Infinite-horizon discrete LQR gain K for u = -K x."""
    P = dare_solve(A_d, B_d, Q, R, tol=tol, max_iter=max_iter)
    B_d = np.atleast_2d(np.asarray(B_d, dtype=float))
    A_d = np.atleast_2d(np.asarray(A_d, dtype=float))
    return np.linalg.solve(R + B_d.T @ P @ B_d, B_d.T @ P @ A_d)


@dataclass
class LqrController:
    """Tracking law u = u_ref - K (x - x_ref)."""

    K: np.ndarray
    x_bar: np.ndarray
    u_bar: np.ndarray

    def control(self, x: np.ndarray, x_ref: np.ndarray, u_ref: np.ndarray) -> np.ndarray:
        return u_ref - self.K @ (x - x_ref)


@dataclass
class TaskBounds:
    """Per-coordinate uniform sampling box for initial and final conditions."""

    lower: np.ndarray
    upper: np.ndarray

    def __post_init__(self):
        self.lower = np.asarray(self.lower, dtype=float)
        self.upper = np.asarray(self.upper, dtype=float)
        if np.any(self.lower > self.upper):
            raise ValueError("inconsistent task bounds")


def training_bounds() -> TaskBounds:
    """y, z in [-2, 2], theta in [-pi/3, pi/3], velocities in [-1, 1]."""
    th = np.pi / 3
    return TaskBounds(lower=[-2, -2, -th, -1, -1, -1], upper=[2, 2, th, 1, 1, 1])


def evaluation_bounds() -> TaskBounds:
    """Same box with theta restricted to [-0.1, 0.1]."""
    return TaskBounds(lower=[-2, -2, -0.1, -1, -1, -1], upper=[2, 2, 0.1, 1, 1, 1])


def sample_task(bounds: TaskBounds, rng: np.random.Generator) -> Tuple[np.ndarray, np.ndarray]:
    """Draw (x0, xf) uniformly from the bounds box."""
    x0 = rng.uniform(bounds.lower, bounds.upper)
    xf = rng.uniform(bounds.lower, bounds.upper)
    return x0, xf


def hover_model(params: QuadrotorParams, plant: ControlAffinePlant, dt: float) -> LinearModel:
    """ZOH-discretized hover linearization as an affine model in absolute inputs."""
    x_bar = np.zeros(plant.state_dim)
    u_bar = np.full(plant.input_dim, params.hover_thrust)
    A_c, B_c = linearize_continuous(plant, x_bar, u_bar)
    A_d, B_d = zoh_discretize(A_c, B_c, dt)
    # absolute-input coordinates: x+ = A x + B u + c with c = -B u_hover
    return LinearModel(A=A_d, B=B_d, Cx=np.eye(plant.state_dim),
                       dictionary=identity_dictionary(plant.state_dim),
                       dt=dt, offset=-B_d @ u_bar, kind="nominal")


class ReferenceInfeasible(RuntimeError):
    pass


def plan_feasible(lin_model: LinearModel, x0: np.ndarray, xf: np.ndarray,
                  N: int, cfg: MpcConfig) -> bool:
    """Exact feasibility prescreen for box-constrained terminal-equality plans.

    Condenses the linear dynamics into per-step state maps and solves one LP
    over the input sequence (input box, any finite per-coordinate state
    bounds, terminal equality); certain infeasibility is detected in
    milliseconds instead of waiting for the ADMM infeasibility certificate.
    """
    A, B, c = lin_model.A, lin_model.B, lin_model.offset
    Cx = lin_model.Cx
    n, m = A.shape[0], B.shape[1]
    z0 = lin_model.lift(np.asarray(x0, dtype=float))
    # forward recursion: x_k = Cx (free_k + P_k u), u the stacked inputs
    P = np.zeros((n, N * m))
    free = z0.copy()
    A_ub_rows, b_ub = [], []
    box = np.where(np.isfinite(cfg.state_lower) | np.isfinite(cfg.state_upper))[0]
    for k in range(N):
        for i in box:
            row = Cx[i] @ P
            val = float(Cx[i] @ free)
            if np.isfinite(cfg.state_upper[i]):
                A_ub_rows.append(row)
                b_ub.append(cfg.state_upper[i] - val)
            if np.isfinite(cfg.state_lower[i]):
                A_ub_rows.append(-row)
                b_ub.append(val - cfg.state_lower[i])
        P = A @ P
        P[:, k * m:(k + 1) * m] += B
        free = A @ free + c
    target = np.asarray(xf, dtype=float) - Cx @ free
    bounds = list(zip(np.tile(cfg.input_lower, N), np.tile(cfg.input_upper, N)))
    kwargs = {}
    if A_ub_rows:
        kwargs = {"A_ub": np.array(A_ub_rows), "b_ub": np.array(b_ub)}
    res = linprog(np.zeros(N * m), A_eq=Cx @ P, b_eq=target,
                  bounds=bounds, method="highs", **kwargs)
    return res.status != 2  # only a certain-infeasible verdict rejects


def generate_reference(x0: np.ndarray, xf: np.ndarray, T: float,
                       lin_model: LinearModel, mpc_cfg: MpcConfig,
                       qp_tol: float = 1e-5, qp_max_iter: int = 20000,
                       qp_rho: float = 100.0) -> Trajectory:
    """Plan a minimum-effort reference on the linear model with a terminal equality."""
    N = int(round(T / mpc_cfg.dt))
    if abs(N * mpc_cfg.dt - T) > 1e-9:
        raise ValueError("duration must be an integer number of sampling intervals")
    cfg = MpcConfig(horizon=N, dt=mpc_cfg.dt, Q=mpc_cfg.Q, R=mpc_cfg.R, QN=mpc_cfg.QN,
                    state_lower=mpc_cfg.state_lower, state_upper=mpc_cfg.state_upper,
                    input_lower=mpc_cfg.input_lower, input_upper=mpc_cfg.input_upper,
                    terminal_state=np.asarray(xf, dtype=float))
    if not plan_feasible(lin_model, x0, xf, N, cfg):
        raise ReferenceInfeasible("terminal state unreachable under the constraints")
    qp = build_linear_mpc_qp(lin_model, x0, cfg)
    sol = solve_qp(qp, tol_abs=qp_tol, tol_rel=qp_tol, max_iter=qp_max_iter,
                   rho=qp_rho, adaptive_rho=False)
    if sol.status != "solved":
        raise ReferenceInfeasible(f"reference QP returned status {sol.status}")
    layout = QpLayout(n=lin_model.lifted_dim, m=lin_model.input_dim, N=N)
    Z, U = layout.split(sol.x)
    X = Z @ lin_model.Cx.T
    return Trajectory(dt=cfg.dt, states=X, inputs=U)


@dataclass
class Dataset:
    """Collection of uniformly sampled trajectories with a shared interval."""

    dt: float
    trajectories: List[Trajectory]

    def __post_init__(self):
        for traj in self.trajectories:
            if abs(traj.dt - self.dt) > 1e-12:
                raise ValueError("trajectory sampling interval mismatch")

    @property
    def num_trajectories(self) -> int:
        return len(self.trajectories)

    def to_csv(self, path) -> None:
        d = self.trajectories[0].states.shape[1]
        m = self.trajectories[0].inputs.shape[1]
        header = ",".join(["traj_id", "t"] + [f"x{i}" for i in range(d)]
                          + [f"u{i}" for i in range(m)])
        lines = [header]
        for j, traj in enumerate(self.trajectories):
            for k in range(traj.states.shape[0]):
                cells = [str(j), f"{k * traj.dt:.17g}"]
                cells += [f"{v:.17g}" for v in traj.states[k]]
                if k < traj.num_steps:
                    cells += [f"{v:.17g}" for v in traj.inputs[k]]
                else:
                    cells += [""] * m
                lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Dataset":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            d = sum(1 for c in header if c.startswith("x"))
            m = sum(1 for c in header if c.startswith("u"))
            groups = {}
            for line in fh:
                cells = line.rstrip("\n").split(",")
                if len(cells) < 2 + d:
                    continue
                j = int(cells[0])
                groups.setdefault(j, []).append(cells[1:])
        trajectories = []
        dt = None
        for j in sorted(groups):
            rows = groups[j]
            times = [float(r[0]) for r in rows]
            states = np.array([[float(v) for v in r[1:1 + d]] for r in rows])
            inputs = []
            for r in rows:
                u_cells = r[1 + d:1 + d + m]
                if all(c != "" for c in u_cells):
                    inputs.append([float(v) for v in u_cells])
            traj_dt = times[1] - times[0]
            dt = traj_dt if dt is None else dt
            trajectories.append(Trajectory(dt=traj_dt, states=states,
                                           inputs=np.array(inputs)))
        return cls(dt=dt, trajectories=trajectories)


@dataclass
class CollectionStats:
    resampled: int = 0
    discarded: int = 0


def collect_trajectory(plant: ControlAffinePlant, controller: LqrController,
                       reference: Trajectory, x0: np.ndarray, dt: float,
                       noise_std: float, rng: np.random.Generator,
                       input_lower: np.ndarray, input_upper: np.ndarray,
                       substeps: int = 10) -> Trajectory:
    """Track the reference with LQR plus Gaussian excitation on the true plant."""
    N = reference.num_steps
    d = plant.state_dim
    m = plant.input_dim
    X = np.empty((N + 1, d))
    U = np.empty((N, m))
    X[0] = np.asarray(x0, dtype=float)
    for k in range(N):
        u = controller.control(X[k], reference.states[k], reference.inputs[k])
        u = u + noise_std * rng.standard_normal(m)
        u = np.clip(u, input_lower, input_upper)
        U[k] = u
        X[k + 1] = simulate_zoh(plant, X[k], u[None, :], dt, substeps).states[-1]
        if np.linalg.norm(X[k + 1]) > DIVERGENCE_LIMIT:
            raise IntegrationError("trajectory diverged", step=k)
    return Trajectory(dt=dt, states=X, inputs=U)


def collect_dataset(plant: ControlAffinePlant, controller: LqrController,
                    lin_model: LinearModel, bounds: TaskBounds,
                    num_trajectories: int, T_t: float, dt: float,
                    noise_std: float, rng: np.random.Generator,
                    ref_cfg: MpcConfig, input_lower: np.ndarray,
                    input_upper: np.ndarray, substeps: int = 10,
                    stats: Optional[CollectionStats] = None) -> Dataset:
    """Assemble a dataset of LQR-tracked, noise-excited trajectories.

    Diverged or infeasible tasks are resampled so the dataset always reaches
    the requested trajectory count.
    """
    if stats is None:
        stats = CollectionStats()
    trajectories: List[Trajectory] = []
    attempts = 0
    max_attempts = 50 * num_trajectories
    while len(trajectories) < num_trajectories:
        if attempts >= max_attempts:
            raise RuntimeError("too many failed collection attempts")
        attempts += 1
        x0, xf = sample_task(bounds, rng)
        try:
            reference = generate_reference(x0, xf, T_t, lin_model, ref_cfg)
        except ReferenceInfeasible as err:
            log.info("reference infeasible, resampling task: %s", err)
            stats.resampled += 1
            continue
        try:
            traj = collect_trajectory(plant, controller, reference, x0, dt,
                                      noise_std, rng, input_lower, input_upper,
                                      substeps=substeps)
        except IntegrationError as err:
            log.info("trajectory discarded (divergence at step %s)", err.step)
            stats.discarded += 1
            stats.resampled += 1
            continue
        trajectories.append(traj)
    return Dataset(dt=dt, trajectories=trajectories)
