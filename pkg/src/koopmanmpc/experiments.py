"""Experiment orchestration: collection, fitting, and the three evaluations."""

from __future__ import annotations

import logging
import os
from dataclasses import dataclass
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np

from .config import ExperimentConfig
from .data import (CollectionStats, Dataset, LqrController, TaskBounds,
                   ReferenceInfeasible, collect_dataset, evaluation_bounds,
                   generate_reference, hover_model, lqr_gain, plan_feasible,
                   sample_task, training_bounds)
from .estimators import (KoopmanBilinearModel, build_matrices, cross_validate,
                         default_lambda_grid, fit_bedmd, fit_dmd, fit_edmd,
                         load_model, predict_open_loop, save_model,
                         trajectory_mse)
from .lifting import make_dictionary
from .mpc import (BilinearDynamics, ClosedLoopTrace, LinearMpcController,
                  MpcConfig, PlantDynamics, QpLayout, SqpMpcController,
                  build_linear_mpc_qp, closed_loop_run, sqp_solve, SqpWorkspace)
from .plants import QuadrotorParams, Trajectory, planar_quadrotor, simulate_zoh, zoh_discretize, linearize_continuous
from .qp import solve_qp

log = logging.getLogger(__name__)

LEARNED_METHODS = ["dmd", "edmd", "bedmd"]
ALL_METHODS = LEARNED_METHODS + ["nmpc"]
METHOD_LABELS = {"dmd": "DMD (MPC)", "edmd": "EDMD (MPC)",
                 "bedmd": "bEDMD (K-NMPC)", "nmpc": "Benchmark (NMPC)"}

TIMING_COLUMNS = ("solve_ms", "comp_time_ms_mean", "comp_time_ms_std")


def write_csv(path, header: Sequence[str], rows: Sequence[Sequence]) -> None:
    def fmt(v):
        if isinstance(v, float):
            return f"{v:.17g}"
        return str(v)
    lines = [",".join(header)]
    lines += [",".join(fmt(v) for v in row) for row in rows]
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def read_csv(path) -> Tuple[List[str], List[List[str]]]:
    with open(path) as fh:
        header = fh.readline().strip().split(",")
        rows = [line.rstrip("\n").split(",") for line in fh if line.strip()]
    return header, rows


def _rng(cfg: ExperimentConfig, stream: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([cfg.seed, stream]))


@dataclass
class Bench:
    """Plant, nominal controller, and shared configuration pieces."""

    cfg: ExperimentConfig
    params: QuadrotorParams
    plant: object
    lqr: LqrController
    nominal_model: object

    @classmethod
    def build(cls, cfg: ExperimentConfig) -> "Bench":
        params = QuadrotorParams(mass=cfg.mass, inertia=cfg.inertia,
                                 arm_length=cfg.arm_length, gravity=cfg.gravity)
        plant = planar_quadrotor(params)
        model = hover_model(params, plant, cfg.control_dt)
        K = lqr_gain(model.A, model.B, np.diag(cfg.lqr_q_diag), np.diag(cfg.lqr_r_diag))
        hover_u = np.full(2, params.hover_thrust)
        lqr = LqrController(K=K, x_bar=np.zeros(6), u_bar=hover_u)
        return cls(cfg=cfg, params=params, plant=plant, lqr=lqr, nominal_model=model)

    @property
    def input_lower(self) -> np.ndarray:
        return np.zeros(2)

    @property
    def input_upper(self) -> np.ndarray:
        return np.full(2, self.cfg.thrust_upper)

    def reference_cfg(self) -> MpcConfig:
        # minimum-effort planning on the nominal model for data collection
        return MpcConfig(horizon=1, dt=self.cfg.control_dt,
                         Q=np.zeros((6, 6)), R=np.eye(2), QN=np.zeros((6, 6)),
                         input_lower=self.input_lower, input_upper=self.input_upper)

    def trajgen_cfg(self, xf: Optional[np.ndarray] = None) -> MpcConfig:
        v = self.cfg.velocity_bound
        lower = np.array([-np.inf, -np.inf, -np.inf, -v, -v, -v])
        upper = -lower
        N = int(round(self.cfg.trajgen_duration / self.cfg.control_dt))
        return MpcConfig(horizon=N, dt=self.cfg.control_dt,
                         Q=np.zeros((6, 6)), R=np.eye(2), QN=np.zeros((6, 6)),
                         state_lower=lower, state_upper=upper,
                         input_lower=self.input_lower, input_upper=self.input_upper,
                         terminal_state=xf)

    def closed_loop_cfg(self) -> MpcConfig:
        v = self.cfg.velocity_bound
        lower = np.array([-np.inf, -np.inf, -np.inf, -v, -v, -v])
        upper = -lower
        Q = np.diag(self.cfg.closed_loop_q_diag)
        N = int(round(self.cfg.closed_loop_horizon / self.cfg.control_dt))
        return MpcConfig(horizon=N, dt=self.cfg.control_dt,
                         Q=Q, R=np.diag(self.cfg.closed_loop_r_diag),
                         QN=self.cfg.terminal_weight_scale * Q,
                         state_lower=lower, state_upper=upper,
                         input_lower=self.input_lower, input_upper=self.input_upper)


def _collect(bench: Bench, num: int, rng: np.random.Generator) -> Tuple[Dataset, CollectionStats]:
    cfg = bench.cfg
    stats = CollectionStats()
    dataset = collect_dataset(
        bench.plant, bench.lqr, bench.nominal_model, training_bounds(),
        num, cfg.collect_duration, cfg.control_dt, cfg.noise_std, rng,
        bench.reference_cfg(), bench.input_lower, bench.input_upper,
        substeps=cfg.sim_substeps, stats=stats)
    return dataset, stats


def run_collect(cfg: ExperimentConfig, out_dir: str) -> Dataset:
    """Collect the training dataset and persist it with collection statistics."""
    os.makedirs(out_dir, exist_ok=True)
    bench = Bench.build(cfg)
    dataset, stats = _collect(bench, cfg.collect_trajectories, _rng(cfg, 1))
    dataset.to_csv(os.path.join(out_dir, "dataset_train.csv"))
    write_csv(os.path.join(out_dir, "collect_stats.csv"),
              ["num_trajectories", "resampled", "discarded"],
              [[dataset.num_trajectories, stats.resampled, stats.discarded]])
    return dataset


def run_fit(cfg: ExperimentConfig, out_dir: str,
            methods: Sequence[str] = LEARNED_METHODS) -> Dict[str, object]:
    """Fit the requested models on the stored training dataset."""
    dataset = Dataset.from_csv(os.path.join(out_dir, "dataset_train.csv"))
    dictionary = make_dictionary(cfg.dictionary)
    identity = make_dictionary("identity", 6)
    models = {}
    fit_rows = []
    # The linear regressions (DMD, EDMD) are fit on raw actuator inputs. Only
    # the bilinear regression uses hover-centered input coordinates: its
    # regressor blocks [Z; Z*u1; Z*u2] are near-collinear around hover
    # (Z*u ~ T_hover*Z) and the fit degenerates without centering. The shift
    # is folded back exactly afterwards, so the returned model keeps
    # raw-input semantics.
    hover_offset = np.full(2, cfg.hover_thrust)
    for method in methods:
        dic = identity if method == "dmd" else dictionary
        input_offset = hover_offset if method == "bedmd" else None
        mats = build_matrices(dataset, dic, input_offset=input_offset)
        if cfg.use_cross_validation:
            grid = np.asarray(cfg.lambda_grid_factors) * (
                np.linalg.norm(mats.Zp, "fro") / mats.num_samples)
            lam = cross_validate(dataset, dic, grid, folds=cfg.cv_folds,
                                 method=method, input_offset=input_offset)
        else:
            lam = 0.0
        if method == "dmd":
            model = fit_dmd(mats, lam)
        elif method == "edmd":
            model = fit_edmd(mats, dic, lam)
        else:
            model = fit_bedmd(mats, dic, lam)
        save_model(model, os.path.join(out_dir, f"model_{method}.txt"))
        models[method] = model
        fit_rows.append([method, float(lam), mats.num_samples])
    write_csv(os.path.join(out_dir, "fit_summary.csv"),
              ["method", "lambda", "num_samples"], fit_rows)
    return models


def load_models(out_dir: str, methods: Sequence[str] = LEARNED_METHODS) -> Dict[str, object]:
    models = {}
    for method in methods:
        path = os.path.join(out_dir, f"model_{method}.txt")
        if not os.path.exists(path):
            raise FileNotFoundError(f"model file missing: {path}; run `fit` first")
        models[method] = load_model(path)
    return models


def improvement_pct(new: float, old: float) -> float:
    return 100.0 * (1.0 - new / old)


def run_open_loop_eval(cfg: ExperimentConfig, out_dir: str) -> Dict[str, dict]:
    """Roll each model forward under recorded test inputs; report MSE statistics."""
    bench = Bench.build(cfg)
    models = load_models(out_dir)
    test_set, _ = _collect(bench, cfg.test_trajectories, _rng(cfg, 2))
    test_set.to_csv(os.path.join(out_dir, "dataset_test.csv"))

    rows = []
    per_method = {m: [] for m in LEARNED_METHODS}
    for j, traj in enumerate(test_set.trajectories):
        row = [j]
        for method in LEARNED_METHODS:
            predicted, diverged = predict_open_loop(models[method],
                                                    traj.states[0], traj.inputs)
            mse = trajectory_mse(predicted, traj)
            per_method[method].append(mse)
            row += [mse, -1 if diverged is None else diverged]
        rows.append(row)
    header = ["traj_id"]
    for method in LEARNED_METHODS:
        header += [f"mse_{method}", f"diverged_{method}"]
    write_csv(os.path.join(out_dir, "open_loop_tasks.csv"), header, rows)

    summary = {}
    for method in LEARNED_METHODS:
        arr = np.array(per_method[method])
        summary[method] = {"mse_mean": float(arr.mean()), "mse_std": float(arr.std())}
    for method in ("edmd", "bedmd"):
        summary[method]["improvement_vs_dmd_pct"] = improvement_pct(
            summary[method]["mse_mean"], summary["dmd"]["mse_mean"])
    summary["bedmd"]["improvement_vs_edmd_pct"] = improvement_pct(
        summary["bedmd"]["mse_mean"], summary["edmd"]["mse_mean"])
    out_rows = []
    for method in LEARNED_METHODS:
        s = summary[method]
        out_rows.append([method, s["mse_mean"], s["mse_std"],
                         s.get("improvement_vs_dmd_pct", float("nan")),
                         s.get("improvement_vs_edmd_pct", float("nan"))])
    write_csv(os.path.join(out_dir, "open_loop_summary.csv"),
              ["method", "mse_mean", "mse_std",
               "improvement_vs_dmd_pct", "improvement_vs_edmd_pct"], out_rows)
    return summary


EVAL_TASK_MARGIN = 0.85


def _sample_eval_tasks(cfg: ExperimentConfig, count: int,
                       bench: Optional[Bench] = None) -> List[Tuple[np.ndarray, np.ndarray]]:
    """Evaluation tasks, resampled (like collection tasks) until the nominal
    hover model certifies them reachable under the planning constraints.

    The prescreen shrinks the velocity and thrust boxes by a safety margin:
    tasks that are only feasible with near-saturated constraints sit on the
    feasibility boundary, where every planner (including the benchmark) grinds
    through orders of magnitude more solver iterations without contributing a
    representative comparison."""
    rng = _rng(cfg, 3)
    bounds = evaluation_bounds()
    if bench is None:
        return [sample_task(bounds, rng) for _ in range(count)]
    base = bench.trajgen_cfg()
    v = cfg.velocity_bound * EVAL_TASK_MARGIN
    state_lower = np.array([-np.inf, -np.inf, -np.inf, -v, -v, -v])
    pad = (1.0 - EVAL_TASK_MARGIN) * 0.5 * cfg.thrust_upper
    plan_cfg = MpcConfig(horizon=base.horizon, dt=base.dt, Q=base.Q, R=base.R,
                         state_lower=state_lower, state_upper=-state_lower,
                         input_lower=np.full(2, pad),
                         input_upper=np.full(2, cfg.thrust_upper - pad))
    N = plan_cfg.horizon
    tasks = []
    attempts = 0
    while len(tasks) < count:
        if attempts >= 50 * count:
            raise RuntimeError("too many infeasible evaluation tasks")
        attempts += 1
        x0, xf = sample_task(bounds, rng)
        if plan_feasible(bench.nominal_model, x0, xf, N, plan_cfg):
            tasks.append((x0, xf))
    return tasks


def _plan_linear(model, x0, cfg_mpc, qp_tol, qp_max_iter, qp_rho, qp_rho_eq_scale):
    qp = build_linear_mpc_qp(model, x0, cfg_mpc)
    sol = solve_qp(qp, tol_abs=qp_tol, tol_rel=qp_tol, max_iter=qp_max_iter,
                   rho=qp_rho, adaptive_rho=False, rho_eq_scale=qp_rho_eq_scale)
    if sol.status != "solved":
        return None, None, sol.status
    layout = QpLayout(n=model.lifted_dim, m=model.input_dim, N=cfg_mpc.horizon)
    Z, U = layout.split(sol.x)
    return Z @ model.Cx.T, U, sol.status


def _nominal_plan(bench: Bench, x0, xf, cfg_mpc) -> Optional[Trajectory]:
    """Minimum-effort plan on the nominal hover model, used to warm-start the
    SQP planners (cuts their iteration count roughly in half)."""
    try:
        return generate_reference(x0, xf, cfg_mpc.horizon * cfg_mpc.dt,
                                  bench.nominal_model, cfg_mpc,
                                  qp_tol=bench.cfg.qp_tol_planning,
                                  qp_max_iter=max(bench.cfg.qp_max_iter, 20000),
                                  qp_rho=bench.cfg.qp_rho_planning)
    except ReferenceInfeasible:
        return None


def _plan_sqp(adapter, x0, xf, cfg_mpc, cfg: ExperimentConfig, hover: float,
              init: Optional[Trajectory] = None):
    N = cfg_mpc.horizon
    if init is not None:
        x_interp = init.states
        u_init = init.inputs.copy()
    else:
        alphas = np.linspace(0.0, 1.0, N + 1)[:, None]
        x_interp = (1 - alphas) * np.asarray(x0)[None, :] + alphas * np.asarray(xf)[None, :]
        u_init = np.full((N, adapter.m), hover)
    z_init = np.array([adapter.lift(x) for x in x_interp])
    ws = SqpWorkspace(x_init=z_init, u_init=u_init,
                      x_ref=np.zeros((N + 1, 6)), u_ref=np.zeros((N, adapter.m)))
    result = sqp_solve(adapter, x0, ws, cfg_mpc,
                       tol=cfg.sqp_tol_planning, max_iter=cfg.sqp_max_iter,
                       qp_tol=cfg.qp_tol_planning, qp_max_iter=cfg.qp_max_iter,
                       qp_rho=cfg.qp_rho_planning,
                       qp_rho_eq_scale=cfg.qp_rho_eq_scale_planning)
    X = result.x @ adapter.Cx.T
    return X, result.u, result


def run_trajectory_generation(cfg: ExperimentConfig, out_dir: str) -> Dict[str, dict]:
    """Plan point-to-point trajectories with each controller, then open-loop
    simulate each plan on the true plant."""
    bench = Bench.build(cfg)
    models = load_models(out_dir)
    tasks = _sample_eval_tasks(cfg, cfg.trajgen_tasks, bench)
    hover = bench.params.hover_thrust

    rows = []
    metrics = {m: {"effort": [], "terminal": [], "iters": [], "failures": 0}
               for m in ALL_METHODS}
    for t, (x0, xf) in enumerate(tasks):
        cfg_mpc = bench.trajgen_cfg(xf)
        warm = _nominal_plan(bench, x0, xf, cfg_mpc)
        plans = {}
        iters = {}
        for method in ALL_METHODS:
            if method in ("dmd", "edmd"):
                X, U, status = _plan_linear(models[method], x0, cfg_mpc,
                                            cfg.qp_tol_planning,
                                            max(cfg.qp_max_iter, 40000),
                                            cfg.qp_rho_planning,
                                            cfg.qp_rho_eq_scale_planning)
                ok = status == "solved"
                iters[method] = 0
            else:
                adapter = (BilinearDynamics(models["bedmd"]) if method == "bedmd"
                           else PlantDynamics(bench.plant, cfg.control_dt))
                X, U, result = _plan_sqp(adapter, x0, xf, cfg_mpc, cfg, hover,
                                         init=warm)
                ok = result.status in ("converged", "max-iter")
                iters[method] = result.iterations
            if not ok:
                metrics[method]["failures"] += 1
                plans[method] = None
                continue
            realized = simulate_zoh(bench.plant, x0, U, cfg.control_dt,
                                    cfg.sim_substeps)
            plans[method] = (X, U, realized)
        nmpc_plan = plans.get("nmpc")
        nmpc_effort = (np.linalg.norm(nmpc_plan[1]) if nmpc_plan is not None else None)
        row = [t] + list(x0) + list(xf)
        for method in ALL_METHODS:
            plan = plans[method]
            if plan is None or nmpc_effort is None:
                row += [float("nan")] * 3 + [iters.get(method, 0)]
                continue
            X, U, realized = plan
            effort = float(np.linalg.norm(U)) / nmpc_effort
            terminal = float(np.linalg.norm(realized.states[-1] - xf))
            metrics[method]["effort"].append(effort)
            metrics[method]["terminal"].append(terminal)
            metrics[method]["iters"].append(iters[method])
            row += [effort, terminal, float(np.linalg.norm(U)), iters[method]]
        rows.append(row)
        if t == 0:
            for method in ALL_METHODS:
                if plans[method] is None:
                    continue
                X, U, realized = plans[method]
                Trajectory(dt=cfg.control_dt, states=X, inputs=U).to_csv(
                    os.path.join(out_dir, f"trajgen_trace_{method}_planned.csv"))
                realized.to_csv(
                    os.path.join(out_dir, f"trajgen_trace_{method}_realized.csv"))

    header = (["task_id"] + [f"x0_{i}" for i in range(6)] + [f"xf_{i}" for i in range(6)])
    for method in ALL_METHODS:
        header += [f"effort_norm_{method}", f"terminal_error_{method}",
                   f"effort_abs_{method}", f"sqp_iters_{method}"]
    write_csv(os.path.join(out_dir, "trajgen_tasks.csv"), header, rows)

    summary = {}
    out_rows = []
    for method in ALL_METHODS:
        eff = np.array(metrics[method]["effort"])
        term = np.array(metrics[method]["terminal"])
        its = np.array(metrics[method]["iters"], dtype=float)
        summary[method] = {
            "effort_mean": float(eff.mean()) if eff.size else float("nan"),
            "effort_std": float(eff.std()) if eff.size else float("nan"),
            "terminal_error_mean": float(term.mean()) if term.size else float("nan"),
            "terminal_error_std": float(term.std()) if term.size else float("nan"),
            "sqp_iter_mean": float(its.mean()) if its.size else 0.0,
            "sqp_iter_std": float(its.std()) if its.size else 0.0,
            "failures": metrics[method]["failures"],
        }
        s = summary[method]
        out_rows.append([method, s["effort_mean"], s["effort_std"],
                         s["terminal_error_mean"], s["terminal_error_std"],
                         s["sqp_iter_mean"], s["sqp_iter_std"], s["failures"]])
    write_csv(os.path.join(out_dir, "trajgen_summary.csv"),
              ["method", "effort_mean", "effort_std", "terminal_error_mean",
               "terminal_error_std", "sqp_iter_mean", "sqp_iter_std", "failures"],
              out_rows)
    return summary


def run_closed_loop(cfg: ExperimentConfig, out_dir: str) -> Dict[str, dict]:
    """Run all four controllers in closed loop on the shared task set."""
    bench = Bench.build(cfg)
    models = load_models(out_dir)
    tasks = _sample_eval_tasks(cfg, cfg.closed_loop_tasks, bench)
    hover = bench.params.hover_thrust
    cl_cfg = bench.closed_loop_cfg()

    rows = []
    metrics = {m: {"cost": [], "time": [], "failures": 0} for m in ALL_METHODS}
    for t, (x0, xf) in enumerate(tasks):
        # common reference: the benchmark NMPC trajectory plan for this task
        tg_cfg = bench.trajgen_cfg(xf)
        adapter = PlantDynamics(bench.plant, cfg.control_dt)
        warm = _nominal_plan(bench, x0, xf, tg_cfg)
        X_ref, U_ref, result = _plan_sqp(adapter, x0, xf, tg_cfg, cfg, hover,
                                         init=warm)
        if result.status not in ("converged", "max-iter"):
            for m in ALL_METHODS:
                metrics[m]["failures"] += 1
            log.info("task %d: reference NMPC failed (%s); skipped", t, result.status)
            continue
        u_ref_full = np.vstack([U_ref, np.full((1, 2), hover)])
        traces = {}
        for method in ALL_METHODS:
            if method in ("dmd", "edmd"):
                controller = LinearMpcController(models[method], cl_cfg, X_ref,
                                                 u_ref_full, qp_tol=cfg.qp_tol,
                                                 qp_max_iter=cfg.qp_max_iter,
                                                 qp_rho=cfg.qp_rho_tracking)
            else:
                ad = (BilinearDynamics(models["bedmd"]) if method == "bedmd"
                      else PlantDynamics(bench.plant, cfg.control_dt))
                controller = SqpMpcController(ad, cl_cfg, X_ref, u_ref_full,
                                              sqp_tol=cfg.sqp_tol,
                                              sqp_max_iter=cfg.sqp_max_iter,
                                              qp_tol=cfg.qp_tol,
                                              qp_max_iter=cfg.qp_max_iter,
                                              qp_rho=cfg.qp_rho_tracking)
                controller.initialize(x0, u_guess=np.full((cl_cfg.horizon, 2), hover))
            trace = closed_loop_run(bench.plant, controller, x0,
                                    cfg.closed_loop_duration, cfg.control_dt,
                                    cl_cfg, X_ref, u_ref_full,
                                    substeps=cfg.sim_substeps)
            traces[method] = trace
        nmpc_cost = traces["nmpc"].realized_cost
        if traces["nmpc"].truncated or nmpc_cost <= 0:
            for m in ALL_METHODS:
                metrics[m]["failures"] += 1
            continue
        row = [t]
        for method in ALL_METHODS:
            trace = traces[method]
            if trace.truncated:
                metrics[method]["failures"] += 1
                row += [float("nan"), float(np.mean(trace.solve_ms))]
                continue
            ratio = trace.realized_cost / nmpc_cost
            metrics[method]["cost"].append(ratio)
            metrics[method]["time"].extend(trace.solve_ms.tolist())
            row += [ratio, float(np.mean(trace.solve_ms))]
        rows.append(row)
        if t == 0:
            for method in ALL_METHODS:
                traces[method].to_csv(
                    os.path.join(out_dir, f"closed_loop_trace_{method}.csv"))
            Trajectory(dt=cfg.control_dt, states=X_ref, inputs=U_ref).to_csv(
                os.path.join(out_dir, "closed_loop_reference.csv"))

    header = ["task_id"]
    for method in ALL_METHODS:
        header += [f"cost_ratio_{method}", f"solve_ms_{method}"]
    write_csv(os.path.join(out_dir, "closed_loop_tasks.csv"), header, rows)

    summary = {}
    out_rows = []
    for method in ALL_METHODS:
        cost = np.array(metrics[method]["cost"])
        times = np.array(metrics[method]["time"])
        summary[method] = {
            "realized_cost_mean": float(cost.mean()) if cost.size else float("nan"),
            "realized_cost_std": float(cost.std()) if cost.size else float("nan"),
            "comp_time_ms_mean": float(times.mean()) if times.size else float("nan"),
            "comp_time_ms_std": float(times.std()) if times.size else float("nan"),
            "failures": metrics[method]["failures"],
        }
        s = summary[method]
        out_rows.append([method, s["realized_cost_mean"], s["realized_cost_std"],
                         s["comp_time_ms_mean"], s["comp_time_ms_std"], s["failures"]])
    write_csv(os.path.join(out_dir, "closed_loop_summary.csv"),
              ["method", "realized_cost_mean", "realized_cost_std",
               "comp_time_ms_mean", "comp_time_ms_std", "failures"], out_rows)
    return summary


def _format_table(title: str, header: List[str], rows: List[List[str]]) -> str:
    widths = [max(len(header[i]), *(len(r[i]) for r in rows)) for i in range(len(header))]
    def fmt_row(cells):
        return "  ".join(c.ljust(widths[i]) for i, c in enumerate(cells))
    sep = "-" * (sum(widths) + 2 * (len(widths) - 1))
    out = [title, sep, fmt_row(header), sep]
    out += [fmt_row(r) for r in rows]
    out.append(sep)
    return "\n".join(out)


def emit_report(cfg: ExperimentConfig, out_dir: str, make_figures: bool = True) -> str:
    """Assemble the plain-text report and render figures from stored artifacts."""
    sections = [f"seed: {cfg.seed}", f"profile: {cfg.profile}", ""]

    def num(s, digits=4):
        try:
            v = float(s)
        except ValueError:
            return "n/a"
        if np.isnan(v):
            return "n/a"
        return f"{v:.{digits}g}"

    path = os.path.join(out_dir, "open_loop_summary.csv")
    if os.path.exists(path):
        header, rows = read_csv(path)
        table_rows = [[r[0], num(r[1]), num(r[2]), num(r[3]), num(r[4])] for r in rows]
        sections.append(_format_table(
            "Open-loop prediction error",
            ["method", "mse mean", "mse std", "impr. vs DMD %", "impr. vs EDMD %"],
            table_rows))
        sections.append("")
    else:
        sections.append("Open-loop prediction error: n/a\n")

    path = os.path.join(out_dir, "trajgen_summary.csv")
    if os.path.exists(path):
        header, rows = read_csv(path)
        table_rows = [[r[0], num(r[1]), num(r[2]), num(r[3]), num(r[4]),
                       num(r[5]), num(r[6]), r[7]] for r in rows]
        sections.append(_format_table(
            "Trajectory generation (normalized effort / terminal error)",
            ["method", "effort mean", "effort std", "term. err mean",
             "term. err std", "SQP it mean", "SQP it std", "failures"],
            table_rows))
        sections.append("")
    else:
        sections.append("Trajectory generation: n/a\n")

    path = os.path.join(out_dir, "closed_loop_summary.csv")
    if os.path.exists(path):
        header, rows = read_csv(path)
        table_rows = [[r[0], num(r[1]), num(r[2]), num(r[3]), num(r[4]), r[5]]
                      for r in rows]
        sections.append(_format_table(
            "Closed loop (realized cost normalized by NMPC)",
            ["method", "cost mean", "cost std", "time ms mean", "time ms std",
             "failures"], table_rows))
        sections.append("")
    else:
        sections.append("Closed loop: n/a\n")

    text = "\n".join(sections)
    with open(os.path.join(out_dir, "report.txt"), "w") as fh:
        fh.write(text)
    if make_figures:
        from . import plots
        plots.render_all(out_dir)
    return text


def verify(out_dir: str, tol: float = 1e-9) -> List[str]:
    """Recompute every summary statistic from the raw per-task CSVs."""
    problems = []

    def close(a, b):
        if np.isnan(a) and np.isnan(b):
            return True
        return abs(a - b) <= tol * max(1.0, abs(a), abs(b))

    path = os.path.join(out_dir, "open_loop_tasks.csv")
    spath = os.path.join(out_dir, "open_loop_summary.csv")
    if os.path.exists(path) and os.path.exists(spath):
        header, rows = read_csv(path)
        sheader, srows = read_csv(spath)
        for srow in srows:
            method = srow[0]
            col = header.index(f"mse_{method}")
            values = np.array([float(r[col]) for r in rows])
            if not close(values.mean(), float(srow[1])):
                problems.append(f"open_loop {method} mse_mean mismatch")
            if not close(values.std(), float(srow[2])):
                problems.append(f"open_loop {method} mse_std mismatch")

    path = os.path.join(out_dir, "trajgen_tasks.csv")
    spath = os.path.join(out_dir, "trajgen_summary.csv")
    if os.path.exists(path) and os.path.exists(spath):
        header, rows = read_csv(path)
        sheader, srows = read_csv(spath)
        for srow in srows:
            method = srow[0]
            for metric, s_idx in (("effort_norm", 1), ("terminal_error", 3)):
                col = header.index(f"{metric}_{method}")
                values = np.array([float(r[col]) for r in rows
                                   if r[col] != "" and not np.isnan(float(r[col]))])
                expect = float(srow[s_idx])
                if values.size == 0:
                    if not np.isnan(expect):
                        problems.append(f"trajgen {method} {metric} mismatch")
                    continue
                if not close(values.mean(), expect):
                    problems.append(f"trajgen {method} {metric} mean mismatch")

    path = os.path.join(out_dir, "closed_loop_tasks.csv")
    spath = os.path.join(out_dir, "closed_loop_summary.csv")
    if os.path.exists(path) and os.path.exists(spath):
        header, rows = read_csv(path)
        sheader, srows = read_csv(spath)
        for srow in srows:
            method = srow[0]
            col = header.index(f"cost_ratio_{method}")
            values = np.array([float(r[col]) for r in rows
                               if r[col] != "" and not np.isnan(float(r[col]))])
            expect = float(srow[1])
            if values.size == 0:
                if not np.isnan(expect):
                    problems.append(f"closed_loop {method} cost mismatch")
                continue
            if not close(values.mean(), expect):
                problems.append(f"closed_loop {method} cost_ratio mean mismatch")
    return problems
