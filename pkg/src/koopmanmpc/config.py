"""Experiment configuration: sectioned key-value files with documented defaults."""

from __future__ import annotations

import configparser
from dataclasses import dataclass, field
from typing import List, Optional

import numpy as np


def _float_list(text: str) -> List[float]:
    return [float(tok) for tok in text.replace(",", " ").split()]


@dataclass
class ExperimentConfig:
    """All tunables of the learning and control pipeline.

    The quick profile shrinks task counts for desk-scale runs; the full
    profile matches the 100-trajectory / 100-task protocol.
    """

    seed: int = 0
    profile: str = "quick"

    # plant
    mass: float = 2.0
    inertia: float = 1.0
    arm_length: float = 0.2
    gravity: float = 9.81

    # data collection
    collect_trajectories: int = 100
    collect_duration: float = 2.0
    control_dt: float = 0.01
    noise_std_factor: float = 0.1        # times hover thrust, per channel
    sim_substeps: int = 10
    lqr_q_diag: List[float] = field(default_factory=lambda: [1.0] * 6)
    lqr_r_diag: List[float] = field(default_factory=lambda: [1.0] * 2)

    # lifting / regression
    dictionary: str = "quad27"
    lambda_grid_factors: List[float] = field(
        default_factory=lambda: [1e-6, 1e-5, 1e-4, 1e-3, 1e-2])
    cv_folds: int = 5
    use_cross_validation: bool = True

    # open-loop evaluation
    test_trajectories: int = 100

    # trajectory generation
    trajgen_duration: float = 2.5
    trajgen_tasks: int = 100
    velocity_bound: float = 2.0

    # closed loop
    closed_loop_horizon: float = 0.5
    closed_loop_duration: float = 2.5
    closed_loop_tasks: int = 100
    closed_loop_q_diag: List[float] = field(
        default_factory=lambda: [10.0, 10.0, 10.0, 1.0, 1.0, 1.0])
    closed_loop_r_diag: List[float] = field(default_factory=lambda: [1.0, 1.0])
    terminal_weight_scale: float = 10.0

    # solver settings
    sqp_tol: float = 1e-4
    sqp_max_iter: int = 100
    qp_tol: float = 1e-5
    qp_max_iter: int = 4000
    # trajectory planning runs at production-solver default accuracy; the
    # residual per-stage dynamics defects (~1e-3) are part of what the
    # open-loop replay of planned inputs measures
    qp_tol_planning: float = 1e-3
    sqp_tol_planning: float = 5e-3
    # planning QPs weight equality rows like any other row at the planning
    # step size (rho = 100), matching production-solver defaults; the tracking
    # solver keeps its stiff equality weighting for tight dynamics feasibility
    qp_rho_eq_scale_planning: float = 1.0
    # ADMM step size: minimum-effort planning problems with terminal equalities
    # favor a much larger rho than receding-horizon tracking problems
    qp_rho_tracking: float = 10.0
    qp_rho_planning: float = 100.0

    def __post_init__(self):
        if self.profile not in ("quick", "full"):
            raise ValueError("profile must be 'quick' or 'full'")
        if self.profile == "quick":
            self.collect_trajectories = min(self.collect_trajectories, 20)
            self.test_trajectories = min(self.test_trajectories, 20)
            self.trajgen_tasks = min(self.trajgen_tasks, 20)
            self.closed_loop_tasks = min(self.closed_loop_tasks, 20)
        for name in ("collect_duration", "trajgen_duration",
                     "closed_loop_horizon", "closed_loop_duration"):
            value = getattr(self, name)
            steps = value / self.control_dt
            if abs(steps - round(steps)) > 1e-9:
                raise ValueError(f"{name} must be divisible by the control interval")

    @property
    def hover_thrust(self) -> float:
        return self.mass * self.gravity / 2.0

    @property
    def noise_std(self) -> float:
        return self.noise_std_factor * self.hover_thrust

    @property
    def thrust_upper(self) -> float:
        return 2.0 * self.hover_thrust


_SECTION_FIELDS = {
    "experiment": ["seed", "profile"],
    "plant": ["mass", "inertia", "arm_length", "gravity"],
    "collection": ["collect_trajectories", "collect_duration", "control_dt",
                   "noise_std_factor", "sim_substeps", "lqr_q_diag", "lqr_r_diag"],
    "regression": ["dictionary", "lambda_grid_factors", "cv_folds",
                   "use_cross_validation"],
    "evaluation": ["test_trajectories"],
    "trajgen": ["trajgen_duration", "trajgen_tasks", "velocity_bound"],
    "closed_loop": ["closed_loop_horizon", "closed_loop_duration",
                    "closed_loop_tasks", "closed_loop_q_diag",
                    "closed_loop_r_diag", "terminal_weight_scale"],
    "solver": ["sqp_tol", "sqp_max_iter", "qp_tol", "qp_max_iter",
               "qp_tol_planning", "sqp_tol_planning",
               "qp_rho_eq_scale_planning",
               "qp_rho_tracking", "qp_rho_planning"],
}

_LIST_FIELDS = {"lqr_q_diag", "lqr_r_diag", "lambda_grid_factors",
                "closed_loop_q_diag", "closed_loop_r_diag"}
_INT_FIELDS = {"seed", "collect_trajectories", "sim_substeps", "cv_folds",
               "test_trajectories", "trajgen_tasks", "closed_loop_tasks",
               "sqp_max_iter", "qp_max_iter"}
_STR_FIELDS = {"profile", "dictionary"}
_BOOL_FIELDS = {"use_cross_validation"}


def load_config(path=None, seed: Optional[int] = None,
                profile: Optional[str] = None) -> ExperimentConfig:
    """Read a config file, then apply command-line seed/profile overrides."""
    values = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as fh:
            parser.read_file(fh)
        for section, names in _SECTION_FIELDS.items():
            if not parser.has_section(section):
                continue
            for key in parser.options(section):
                if key not in names:
                    raise ValueError(f"unknown key {key!r} in section [{section}]")
                raw = parser.get(section, key)
                if key in _LIST_FIELDS:
                    values[key] = _float_list(raw)
                elif key in _INT_FIELDS:
                    values[key] = int(raw)
                elif key in _BOOL_FIELDS:
                    values[key] = parser.getboolean(section, key)
                elif key in _STR_FIELDS:
                    values[key] = raw.strip()
                else:
                    values[key] = float(raw)
    if seed is not None:
        values["seed"] = seed
    if profile is not None:
        values["profile"] = profile
    return ExperimentConfig(**values)


def write_default_config(path) -> None:
    """Emit a fully commented default configuration file."""
    cfg = ExperimentConfig()
    lines = []
    for section, names in _SECTION_FIELDS.items():
        lines.append(f"[{section}]")
        for name in names:
            value = getattr(cfg, name)
            if isinstance(value, list):
                value = " ".join(f"{v:g}" for v in value)
            lines.append(f"{name} = {value}")
        lines.append("")
    with open(path, "w") as fh:
        fh.write("\n".join(lines))
