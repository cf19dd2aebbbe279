"""Lifted bilinear (Koopman) model learning and SQP-based NMPC."""

from .plants import (ControlAffinePlant, QuadrotorParams, Trajectory,
                     planar_quadrotor, rk4_step, simulate_zoh,
                     linearize_continuous, zoh_discretize)
from .lifting import Dictionary, make_dictionary, quad27_dictionary, identity_dictionary
from .estimators import (RegressionMatrices, LinearModel, LiftedLinearModel,
                         KoopmanBilinearModel, build_matrices, lasso_solve,
                         fit_dmd, fit_edmd, fit_bedmd, cross_validate,
                         predict_open_loop, save_model, load_model)
from .data import (Dataset, LqrController, TaskBounds, lqr_gain, dare_solve,
                   sample_task, generate_reference, collect_dataset,
                   training_bounds, evaluation_bounds)
from .qp import QpProblem, QpSolution, AdmmSolver, solve_qp, kkt_residuals
from .mpc import (MpcConfig, SqpWorkspace, StageLinearization,
                  build_linear_mpc_qp, build_sqp_qp, koopman_linearize,
                  nmpc_linearize, sqp_solve, shift_warm_start, knmpc_step,
                  closed_loop_run, LinearMpcController, SqpMpcController,
                  BilinearDynamics, PlantDynamics)
from .config import ExperimentConfig, load_config

__version__ = "0.1.0"
