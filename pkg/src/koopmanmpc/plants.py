"""Control-affine plants, the planar quadrotor, and fixed-step ZOH simulation."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np
from scipy.linalg import expm


class IntegrationError(RuntimeError):
    """Raised when an integration step produces a non-finite state."""

    def __init__(self, message: str, step: Optional[int] = None):
        super().__init__(message)
        self.step = step


@dataclass(frozen=True)
class ControlAffinePlant:
    """Continuous-time dynamics of the form xdot = f(x) + sum_i g_i(x) u_i.

    `drift` maps a state to f(x); `input_matrix` maps a state to the d x m
    matrix whose columns are the control vector fields g_i(x). An optional
    `jacobians` callable returns the analytic (A_c, B_c) pair at (x, u);
    when absent, `linearize_continuous` falls back to central differences.
    """

    state_dim: int
    input_dim: int
    drift: Callable[[np.ndarray], np.ndarray]
    input_matrix: Callable[[np.ndarray], np.ndarray]
    jacobians: Optional[Callable[[np.ndarray, np.ndarray], tuple]] = None
    name: str = "plant"

    def vector_field(self, x: np.ndarray, u: np.ndarray) -> np.ndarray:
        x = np.asarray(x, dtype=float)
        u = np.asarray(u, dtype=float)
        if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
            raise ValueError("non-finite state or input")
        return self.drift(x) + self.input_matrix(x) @ u


@dataclass(frozen=True)
class QuadrotorParams:
    """Physical parameters of the planar quadrotor."""

    mass: float = 2.0
    inertia: float = 1.0
    arm_length: float = 0.2
    gravity: float = 9.81

    def __post_init__(self):
        for name in ("mass", "inertia", "arm_length", "gravity"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be strictly positive")

    @property
    def hover_thrust(self) -> float:
        """Per-propeller thrust that balances gravity."""
        return self.mass * self.gravity / 2.0


def quadrotor_vector_field(x: np.ndarray, u: np.ndarray, p: QuadrotorParams) -> np.ndarray:
    """State derivative [ydot, zdot, thetadot, yddot, zddot, thetaddot].

    State is [y, z, theta, ydot, zdot, thetadot]; inputs are the propeller
    thrusts (T1, T2).
    """
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    if not (np.all(np.isfinite(x)) and np.all(np.isfinite(u))):
        raise ValueError("non-finite state or input")
    theta = x[2]
    thrust = u[0] + u[1]
    return np.array([
        x[3],
        x[4],
        x[5],
        -np.sin(theta) / p.mass * thrust,
        -p.gravity + np.cos(theta) / p.mass * thrust,
        p.arm_length / p.inertia * (u[1] - u[0]),
    ])


def quadrotor_jacobians(x: np.ndarray, u: np.ndarray, p: QuadrotorParams):
    """Analytic continuous-time Jacobians of the quadrotor vector field."""
    theta = float(x[2])
    thrust = float(u[0] + u[1])
    A = np.zeros((6, 6))
    A[0, 3] = A[1, 4] = A[2, 5] = 1.0
    A[3, 2] = -np.cos(theta) / p.mass * thrust
    A[4, 2] = -np.sin(theta) / p.mass * thrust
    B = np.zeros((6, 2))
    B[3, :] = -np.sin(theta) / p.mass
    B[4, :] = np.cos(theta) / p.mass
    B[5, 0] = -p.arm_length / p.inertia
    B[5, 1] = p.arm_length / p.inertia
    return A, B


def planar_quadrotor(params: QuadrotorParams = QuadrotorParams()) -> ControlAffinePlant:
    """Planar quadrotor as a control-affine plant."""

    def drift(x):
        theta = x[2]
        return np.array([x[3], x[4], x[5], 0.0, -params.gravity, 0.0])

    def input_matrix(x):
        theta = x[2]
        g = np.zeros((6, 2))
        g[3, :] = -np.sin(theta) / params.mass
        g[4, :] = np.cos(theta) / params.mass
        g[5, 0] = -params.arm_length / params.inertia
        g[5, 1] = params.arm_length / params.inertia
        return g

    return ControlAffinePlant(
        state_dim=6,
        input_dim=2,
        drift=drift,
        input_matrix=input_matrix,
        jacobians=lambda x, u: quadrotor_jacobians(x, u, params),
        name="planar_quadrotor",
    )


def linear_plant(A: np.ndarray, B: np.ndarray) -> ControlAffinePlant:
    """Plant with exactly linear dynamics xdot = A x + B u."""
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    return ControlAffinePlant(
        state_dim=A.shape[0],
        input_dim=B.shape[1],
        drift=lambda x: A @ x,
        input_matrix=lambda x: B,
        jacobians=lambda x, u: (A, B),
        name="linear",
    )


@dataclass
class Trajectory:
    """Uniformly sampled trajectory: N+1 states and N zero-order-hold inputs."""

    dt: float
    states: np.ndarray   # (N+1, d)
    inputs: np.ndarray   # (N, m)

    def __post_init__(self):
        self.states = np.atleast_2d(np.asarray(self.states, dtype=float))
        self.inputs = np.asarray(self.inputs, dtype=float)
        if self.inputs.ndim == 1:
            self.inputs = self.inputs.reshape(-1, 1)
        if self.dt <= 0:
            raise ValueError("dt must be positive")
        if self.states.shape[0] != self.inputs.shape[0] + 1:
            raise ValueError(
                f"expected one more state row than input rows, got "
                f"{self.states.shape[0]} states and {self.inputs.shape[0]} inputs"
            )

    @property
    def num_steps(self) -> int:
        return self.inputs.shape[0]

    @property
    def times(self) -> np.ndarray:
        return self.dt * np.arange(self.states.shape[0])

    def to_csv(self, path) -> None:
        d = self.states.shape[1]
        m = self.inputs.shape[1]
        header = ",".join(["t"] + [f"x{i}" for i in range(d)] + [f"u{i}" for i in range(m)])
        lines = [header]
        for k in range(self.states.shape[0]):
            cells = [f"{self.times[k]:.17g}"]
            cells += [f"{v:.17g}" for v in self.states[k]]
            if k < self.num_steps:
                cells += [f"{v:.17g}" for v in self.inputs[k]]
            else:
                cells += [""] * m
            lines.append(",".join(cells))
        with open(path, "w") as fh:
            fh.write("\n".join(lines) + "\n")

    @classmethod
    def from_csv(cls, path) -> "Trajectory":
        with open(path) as fh:
            header = fh.readline().strip().split(",")
            d = sum(1 for c in header if c.startswith("x"))
            m = sum(1 for c in header if c.startswith("u"))
            times, states, inputs = [], [], []
            for line in fh:
                cells = line.rstrip("\n").split(",")
                if len(cells) < 1 + d:
                    continue
                times.append(float(cells[0]))
                states.append([float(v) for v in cells[1:1 + d]])
                u_cells = cells[1 + d:1 + d + m]
                if all(c != "" for c in u_cells):
                    inputs.append([float(v) for v in u_cells])
        dt = times[1] - times[0] if len(times) > 1 else 1.0
        return cls(dt=dt, states=np.array(states), inputs=np.array(inputs))


def rk4_step(plant: ControlAffinePlant, x: np.ndarray, u: np.ndarray, h: float) -> np.ndarray:
    """One classical Runge-Kutta step with the input held constant."""
    if h <= 0:
        raise ValueError("step size must be positive")
    try:
        k1 = plant.vector_field(x, u)
        k2 = plant.vector_field(x + 0.5 * h * k1, u)
        k3 = plant.vector_field(x + 0.5 * h * k2, u)
        k4 = plant.vector_field(x + h * k3, u)
    except ValueError as err:
        # a stage state overflowed to inf/nan mid-step
        raise IntegrationError(f"non-finite intermediate RK4 stage: {err}") from err
    x_next = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
    if not np.all(np.isfinite(x_next)):
        raise IntegrationError("non-finite state after RK4 step")
    return x_next


def discrete_step(plant: ControlAffinePlant, x: np.ndarray, u: np.ndarray,
                  dt: float, substeps: int = 10) -> np.ndarray:
    """ZOH discretization f_d(x, u): `substeps` RK4 steps over one interval."""
    h = dt / substeps
    x = np.asarray(x, dtype=float)
    for _ in range(substeps):
        x = rk4_step(plant, x, u, h)
    return x


def simulate_zoh(plant: ControlAffinePlant, x0: np.ndarray, u_sequence: np.ndarray,
                 dt: float, substeps: int = 10) -> Trajectory:
    """Roll the plant forward under a piecewise-constant input sequence."""
    if dt <= 0:
        raise ValueError("dt must be positive")
    if substeps < 1:
        raise ValueError("substeps must be at least 1")
    u_sequence = np.atleast_2d(np.asarray(u_sequence, dtype=float))
    N = u_sequence.shape[0]
    X = np.empty((N + 1, plant.state_dim))
    X[0] = np.asarray(x0, dtype=float)
    for k in range(N):
        try:
            X[k + 1] = discrete_step(plant, X[k], u_sequence[k], dt, substeps)
        except IntegrationError as err:
            raise IntegrationError(f"integration failed at step {k}", step=k) from err
    return Trajectory(dt=dt, states=X, inputs=u_sequence)


def linearize_continuous(plant: ControlAffinePlant, x_bar: np.ndarray, u_bar: np.ndarray):
    """Jacobians (A_c, B_c) of the vector field at (x_bar, u_bar).

    Analytic when the plant provides them, central differences otherwise.
    """
    x_bar = np.asarray(x_bar, dtype=float)
    u_bar = np.asarray(u_bar, dtype=float)
    if plant.jacobians is not None:
        return plant.jacobians(x_bar, u_bar)
    d, m = plant.state_dim, plant.input_dim
    A = np.zeros((d, d))
    B = np.zeros((d, m))
    for i in range(d):
        h = 1e-6 * (1.0 + abs(x_bar[i]))
        e = np.zeros(d)
        e[i] = h
        A[:, i] = (plant.vector_field(x_bar + e, u_bar)
                   - plant.vector_field(x_bar - e, u_bar)) / (2 * h)
    for i in range(m):
        h = 1e-6 * (1.0 + abs(u_bar[i]))
        e = np.zeros(m)
        e[i] = h
        B[:, i] = (plant.vector_field(x_bar, u_bar + e)
                   - plant.vector_field(x_bar, u_bar - e)) / (2 * h)
    return A, B


def discrete_jacobians(plant: ControlAffinePlant, x: np.ndarray, u: np.ndarray,
                       dt: float, substeps: int = 10):
    """Sensitivities (A_d, B_d, x_next) of f_d via chain rule through RK4 stages."""
    d, m = plant.state_dim, plant.input_dim
    A_tot = np.eye(d)
    B_tot = np.zeros((d, m))
    h = dt / substeps
    x = np.asarray(x, dtype=float)
    u = np.asarray(u, dtype=float)
    for _ in range(substeps):
        k1 = plant.vector_field(x, u)
        x2 = x + 0.5 * h * k1
        k2 = plant.vector_field(x2, u)
        x3 = x + 0.5 * h * k2
        k3 = plant.vector_field(x3, u)
        x4 = x + h * k3
        k4 = plant.vector_field(x4, u)

        A1, B1 = linearize_continuous(plant, x, u)
        A2, B2 = linearize_continuous(plant, x2, u)
        A3, B3 = linearize_continuous(plant, x3, u)
        A4, B4 = linearize_continuous(plant, x4, u)

        I = np.eye(d)
        dk1_dx, dk1_du = A1, B1
        dk2_dx = A2 @ (I + 0.5 * h * dk1_dx)
        dk2_du = A2 @ (0.5 * h * dk1_du) + B2
        dk3_dx = A3 @ (I + 0.5 * h * dk2_dx)
        dk3_du = A3 @ (0.5 * h * dk2_du) + B3
        dk4_dx = A4 @ (I + h * dk3_dx)
        dk4_du = A4 @ (h * dk3_du) + B4

        A_step = I + h / 6.0 * (dk1_dx + 2 * dk2_dx + 2 * dk3_dx + dk4_dx)
        B_step = h / 6.0 * (dk1_du + 2 * dk2_du + 2 * dk3_du + dk4_du)
        x = x + h / 6.0 * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError("non-finite state during sensitivity propagation")
        A_tot = A_step @ A_tot
        B_tot = A_step @ B_tot + B_step
    return A_tot, B_tot, x


def zoh_discretize(A_c: np.ndarray, B_c: np.ndarray, dt: float):
    """Exact ZOH discretization of a linear system via the matrix exponential."""
    d = A_c.shape[0]
    m = B_c.shape[1]
    M = np.zeros((d + m, d + m))
    M[:d, :d] = A_c
    M[:d, d:] = B_c
    E = expm(M * dt)
    return E[:d, :d], E[:d, d:]
