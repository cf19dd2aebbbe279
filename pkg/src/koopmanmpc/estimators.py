"""Data-matrix assembly and the DMD / EDMD / bilinear-EDMD regressions."""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .lifting import Dictionary, make_dictionary
from .plants import Trajectory


class ConvergenceError(RuntimeError):
    def __init__(self, message: str, gap: float):
        super().__init__(f"{message} (final objective gap {gap:.3e})")
        self.gap = gap


@dataclass
class RegressionMatrices:
    """Columnwise sample matrices: paired columns of X and Xp are one sampling
    interval apart within the same trajectory."""

    X: np.ndarray     # (d, M)
    Xp: np.ndarray    # (d, M)
    U: np.ndarray     # (m, M), centered by input_offset
    Z: np.ndarray     # (D, M)
    Zp: np.ndarray    # (D, M)
    Zu: np.ndarray    # (D*(m+1), M)
    dt: float
    input_offset: np.ndarray = None  # (m,), subtracted from raw inputs

    def __post_init__(self):
        if self.input_offset is None:
            self.input_offset = np.zeros(self.U.shape[0])

    @property
    def num_samples(self) -> int:
        return self.X.shape[1]


def build_matrices(dataset, dictionary: Dictionary,
                   trajectories: Optional[Sequence[Trajectory]] = None,
                   input_offset: Optional[np.ndarray] = None) -> RegressionMatrices:
    """Organize a dataset into regression matrices; no cross-trajectory pairs.

    When input_offset is given (e.g. the hover thrust of a vehicle), the
    regression runs in input coordinates centered on it, which decorrelates
    the bilinear regressor blocks; the fitted models are converted back so
    their step maps take the raw inputs.
    """
    trajs = trajectories if trajectories is not None else dataset.trajectories
    if len(trajs) == 0:
        raise ValueError("dataset is empty")
    dt = trajs[0].dt
    X_cols, Xp_cols, U_cols = [], [], []
    for traj in trajs:
        if abs(traj.dt - dt) > 1e-12:
            raise ValueError("inconsistent sampling interval across trajectories")
        X_cols.append(traj.states[:-1].T)
        Xp_cols.append(traj.states[1:].T)
        U_cols.append(traj.inputs.T)
    X = np.hstack(X_cols)
    Xp = np.hstack(Xp_cols)
    U = np.hstack(U_cols)
    if input_offset is None:
        input_offset = np.zeros(U.shape[0])
    else:
        input_offset = np.asarray(input_offset, dtype=float)
        U = U - input_offset[:, None]
    Z = dictionary.lift_cols(X)
    Zp = dictionary.lift_cols(Xp)
    Zu = dictionary.lift_with_input_cols(X, U)
    return RegressionMatrices(X=X, Xp=Xp, U=U, Z=Z, Zp=Zp, Zu=Zu, dt=dt,
                              input_offset=input_offset)


def _soft_threshold(W: np.ndarray, t: float) -> np.ndarray:
    return np.sign(W) * np.maximum(np.abs(W) - t, 0.0)


def _power_iteration_lmax(G: np.ndarray, iters: int = 200, tol: float = 1e-12) -> float:
    """Largest eigenvalue of a symmetric PSD matrix by power iteration."""
    rng = np.random.default_rng(0)
    v = rng.standard_normal(G.shape[0])
    v /= np.linalg.norm(v)
    lam = 0.0
    for _ in range(iters):
        w = G @ v
        lam_new = float(v @ w)
        nw = np.linalg.norm(w)
        if nw == 0:
            return 0.0
        v = w / nw
        if abs(lam_new - lam) < tol * max(1.0, abs(lam_new)):
            lam = lam_new
            break
        lam = lam_new
    return lam


def lasso_solve(A: np.ndarray, B: np.ndarray, lam: float,
                tol: float = 1e-10, max_iter: int = 10000,
                raise_on_max_iter: bool = False,
                W0: Optional[np.ndarray] = None,
                check_every: int = 10) -> np.ndarray:
    """Multi-target L1-regularized least squares via FISTA.

    Minimizes, independently per target row r,
        1/2 ||B_r - W_r A||^2 + lam * M * ||W_r||_1
    with step size 1/L, L the largest eigenvalue of A A'. Gradients use the
    precomputed Gram matrices so per-iteration cost is independent of M.
    An optional warm start W0 (e.g. the ridge solution) shortens the path;
    the objective-change stopping rule is evaluated every check_every
    iterations.
    """
    if lam < 0:
        raise ValueError("regularization weight must be nonnegative")
    A = np.asarray(A, dtype=float)
    B = np.atleast_2d(np.asarray(B, dtype=float))
    M = A.shape[1]
    G = A @ A.T                   # (features, features)
    BA = B @ A.T                  # (targets, features)
    L = _power_iteration_lmax(G)
    if L <= 0:
        return np.zeros((B.shape[0], A.shape[0]))
    step = 1.0 / L
    thresh = lam * M * step
    bb = 0.5 * float(np.sum(B * B))

    def objective(W):
        # 1/2||B - WA||^2 = 1/2||B||^2 - <W, BA> + 1/2 <W, WG>
        return (bb - float(np.sum(W * BA)) + 0.5 * float(np.sum((W @ G) * W))
                + lam * M * float(np.abs(W).sum()))

    if W0 is None:
        W = np.zeros((B.shape[0], A.shape[0]))
    else:
        W = np.array(W0, dtype=float)
    V = W.copy()
    t = 1.0
    obj_prev = objective(W)
    gap = np.inf
    for it in range(1, max_iter + 1):
        grad = V @ G - BA
        W_next = _soft_threshold(V - step * grad, thresh)
        t_next = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * t * t))
        V = W_next + (t - 1.0) / t_next * (W_next - W)
        W, t = W_next, t_next
        if it % check_every == 0 or it == max_iter:
            obj = objective(W)
            gap = abs(obj_prev - obj)
            if gap < tol * max(1.0, abs(obj_prev)):
                return W
            obj_prev = obj
    if raise_on_max_iter:
        raise ConvergenceError("FISTA did not converge", gap)
    warnings.warn(f"FISTA hit max_iter with objective gap {gap:.3e}")
    return W


def _least_squares_rows(A: np.ndarray, B: np.ndarray, ridge_floor: float = 1e-12) -> np.ndarray:
    """Solve min ||B - W A||^2 rowwise with a small ridge floor on the Gram."""
    G = A @ A.T
    rank = np.linalg.matrix_rank(G)
    if rank < G.shape[0]:
        warnings.warn("rank-deficient regressor; applying ridge floor")
    reg = ridge_floor * max(1.0, np.trace(G) / G.shape[0])
    W = np.linalg.solve(G + reg * np.eye(G.shape[0]), (B @ A.T).T).T
    return W


@dataclass
class LinearModel:
    """Discrete model z+ = A z + B u + offset with projection x = Cx z."""

    A: np.ndarray
    B: np.ndarray
    Cx: np.ndarray
    dictionary: Dictionary
    dt: float
    offset: np.ndarray = None
    kind: str = "dmd"

    def __post_init__(self):
        if self.offset is None:
            self.offset = np.zeros(self.A.shape[0])

    @property
    def lifted_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]

    def lift(self, x: np.ndarray) -> np.ndarray:
        return self.dictionary.lift(x)

    def project(self, z: np.ndarray) -> np.ndarray:
        return self.Cx @ z

    def step(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        return self.A @ z + self.B @ u + self.offset


class LiftedLinearModel(LinearModel):
    """EDMD model: same mechanics as LinearModel over a nontrivial dictionary."""


@dataclass
class KoopmanBilinearModel:
    """Discrete bilinear model z+ = F z + sum_l G_l z u_l, x = Cx z."""

    F: np.ndarray
    G: List[np.ndarray]
    Cx: np.ndarray
    dictionary: Dictionary
    dt: float
    kind: str = "bedmd"

    @property
    def lifted_dim(self) -> int:
        return self.F.shape[0]

    @property
    def input_dim(self) -> int:
        return len(self.G)

    def lift(self, x: np.ndarray) -> np.ndarray:
        return self.dictionary.lift(x)

    def project(self, z: np.ndarray) -> np.ndarray:
        return self.Cx @ z

    def step(self, z: np.ndarray, u: np.ndarray) -> np.ndarray:
        out = self.F @ z
        for l, G_l in enumerate(self.G):
            out = out + G_l @ z * u[l]
        return out


def _regress(A: np.ndarray, B: np.ndarray, lam: float) -> np.ndarray:
    if lam == 0:
        return _least_squares_rows(A, B)
    return lasso_solve(A, B, lam)


def fit_dmd(mats: RegressionMatrices, lam: float = 0.0,
            dictionary: Optional[Dictionary] = None) -> LinearModel:
    """Linear model x+ = A x + B u on the raw state."""
    if mats.num_samples == 0:
        raise ValueError("no samples")
    d = mats.X.shape[0]
    regressor = np.vstack([mats.X, mats.U])
    W = _regress(regressor, mats.Xp, lam)
    from .lifting import identity_dictionary
    dic = identity_dictionary(d)
    A, B = W[:, :d], W[:, d:]
    # regression ran in centered input coordinates; fold the shift back in
    return LinearModel(A=A, B=B, Cx=np.eye(d), dictionary=dic, dt=mats.dt,
                       offset=-B @ mats.input_offset, kind="dmd")


def fit_edmd(mats: RegressionMatrices, dictionary: Dictionary,
             lam: float = 0.0) -> LiftedLinearModel:
    """Lifted linear model z+ = A z + B u."""
    if mats.num_samples == 0:
        raise ValueError("no samples")
    D = mats.Z.shape[0]
    regressor = np.vstack([mats.Z, mats.U])
    W = _regress(regressor, mats.Zp, lam)
    A, B = W[:, :D], W[:, D:]
    return LiftedLinearModel(A=A, B=B, Cx=dictionary.Cx.copy(),
                             dictionary=dictionary, dt=mats.dt,
                             offset=-B @ mats.input_offset, kind="edmd")


def fit_bedmd(mats: RegressionMatrices, dictionary: Dictionary,
              lam: float = 0.0) -> KoopmanBilinearModel:
    """Lifted bilinear model z+ = F z + sum_l G_l z u_l."""
    if mats.num_samples == 0:
        raise ValueError("no samples")
    D = mats.Z.shape[0]
    m = mats.U.shape[0]
    W = _regress(mats.Zu, mats.Zp, lam)
    F = W[:, :D]
    G = [W[:, D * (l + 1):D * (l + 2)] for l in range(m)]
    # centered inputs: z+ = F z + sum G_l z (u_l - off_l); the shift folds
    # exactly into the state matrix, so the returned model takes raw inputs
    for l in range(m):
        F = F - G[l] * mats.input_offset[l]
    return KoopmanBilinearModel(F=F, G=G, Cx=dictionary.Cx.copy(),
                                dictionary=dictionary, dt=mats.dt)


def default_lambda_grid(mats: RegressionMatrices) -> np.ndarray:
    scale = np.linalg.norm(mats.Zp, "fro") / mats.num_samples
    return np.array([1e-6, 1e-5, 1e-4, 1e-3, 1e-2]) * scale


def _rollout_mse(model, trajs: Sequence[Trajectory]) -> float:
    """Mean open-loop rollout MSE over trajectories; divergence scores inf."""
    total = 0.0
    for traj in trajs:
        predicted, diverged = predict_open_loop(model, traj.states[0], traj.inputs)
        if diverged is not None:
            return float("inf")
        total += trajectory_mse(predicted, traj)
    return total / max(len(trajs), 1)


def cross_validate(dataset, dictionary: Dictionary, lam_grid: Sequence[float],
                   folds: int = 5, method: str = "bedmd",
                   input_offset: Optional[np.ndarray] = None) -> float:
    """Pick the L1 weight minimizing mean held-out open-loop rollout MSE.

    Splits are by whole trajectory; ties break toward the larger (sparser)
    weight. Scoring rolls the candidate model over each held-out trajectory's
    full input sequence, which (unlike one-step error) penalizes models whose
    lifted dynamics are unstable; rollouts that blow up score infinitely bad.
    """
    lam_grid = list(lam_grid)
    if len(lam_grid) == 0:
        raise ValueError("empty regularization grid")
    if folds < 2:
        raise ValueError("need at least 2 folds")
    if len(lam_grid) == 1:
        return lam_grid[0]
    trajs = dataset.trajectories
    folds = min(folds, len(trajs))
    assignments = [i % folds for i in range(len(trajs))]
    scores = np.zeros(len(lam_grid))
    for fold in range(folds):
        train = [t for t, a in zip(trajs, assignments) if a != fold]
        test = [t for t, a in zip(trajs, assignments) if a == fold]
        if not train or not test:
            continue
        mats = build_matrices(dataset, dictionary, trajectories=train,
                              input_offset=input_offset)
        for i, lam in enumerate(lam_grid):
            if method == "bedmd":
                model = fit_bedmd(mats, dictionary, lam)
            elif method == "edmd":
                model = fit_edmd(mats, dictionary, lam)
            elif method == "dmd":
                model = fit_dmd(mats, lam)
            else:
                raise ValueError(f"unknown method {method!r}")
            scores[i] += _rollout_mse(model, test)
    best_score = scores.min()
    tol = 1e-9 * max(best_score, 1e-300)
    ties = [i for i in range(len(lam_grid)) if scores[i] <= best_score + tol]
    return max((lam_grid[i] for i in ties))


BLOWUP_LIMIT = 1e6


def predict_open_loop(model, x0: np.ndarray, u_sequence: np.ndarray,
                      relift: bool = False):
    """Roll the discrete model forward in lifted space under recorded inputs.

    Returns (trajectory, diverged_at) where diverged_at is the step index at
    which |z| exceeded the blow-up limit (None when the rollout stayed finite);
    the trajectory is truncated at that step.
    """
    u_sequence = np.atleast_2d(np.asarray(u_sequence, dtype=float))
    N = u_sequence.shape[0]
    z = model.lift(np.asarray(x0, dtype=float))
    X = [model.project(z)]
    diverged_at = None
    for k in range(N):
        z = model.step(z, u_sequence[k])
        if not np.all(np.isfinite(z)) or np.linalg.norm(z) > BLOWUP_LIMIT:
            diverged_at = k
            break
        x = model.project(z)
        X.append(x)
        if relift:
            z = model.lift(x)
    n_states = len(X)
    traj = Trajectory(dt=model.dt, states=np.array(X), inputs=u_sequence[:n_states - 1])
    return traj, diverged_at


def trajectory_mse(predicted: Trajectory, actual: Trajectory) -> float:
    """Mean over timesteps of the squared Euclidean state error."""
    n = min(predicted.states.shape[0], actual.states.shape[0])
    diff = predicted.states[:n] - actual.states[:n]
    return float(np.mean(np.sum(diff * diff, axis=1)))


def save_model(model, path) -> None:
    """Self-describing text serialization at full precision."""
    lines = [f"kind: {model.kind}",
             f"dictionary: {model.dictionary.name}",
             f"state_dim: {model.Cx.shape[0]}",
             f"lifted_dim: {model.lifted_dim}",
             f"input_dim: {model.input_dim}",
             f"dt: {model.dt:.17g}"]

    def emit(name, mat):
        mat = np.atleast_2d(mat)
        lines.append(f"matrix {name} {mat.shape[0]} {mat.shape[1]}")
        for row in mat:
            lines.append(" ".join(f"{v:.17g}" for v in row))

    if isinstance(model, KoopmanBilinearModel):
        emit("F", model.F)
        for l, G_l in enumerate(model.G):
            emit(f"G{l + 1}", G_l)
    else:
        emit("A", model.A)
        emit("B", model.B)
        emit("offset", model.offset.reshape(1, -1))
    emit("Cx", model.Cx)
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path):
    meta = {}
    matrices = {}
    with open(path) as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        line = lines[i]
        if line.startswith("matrix "):
            _, name, rows, cols = line.split()
            rows, cols = int(rows), int(cols)
            data = [list(map(float, lines[i + 1 + r].split())) for r in range(rows)]
            matrices[name] = np.array(data).reshape(rows, cols)
            i += 1 + rows
        else:
            key, _, value = line.partition(":")
            meta[key.strip()] = value.strip()
            i += 1
    dic = make_dictionary(meta["dictionary"], int(meta["state_dim"]))
    dt = float(meta["dt"])
    Cx = matrices["Cx"]
    if not dic.analytic_projection or meta.get("projection") == "learned":
        dic.Cx = Cx
    if meta["kind"] == "bedmd":
        m = int(meta["input_dim"])
        G = [matrices[f"G{l + 1}"] for l in range(m)]
        return KoopmanBilinearModel(F=matrices["F"], G=G, Cx=Cx, dictionary=dic, dt=dt)
    cls = LiftedLinearModel if meta["kind"] == "edmd" else LinearModel
    return cls(A=matrices["A"], B=matrices["B"], Cx=Cx, dictionary=dic,
               dt=dt, offset=matrices["offset"].ravel(), kind=meta["kind"])
