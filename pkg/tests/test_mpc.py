"""MPC QP assembly, SQP iterations, warm-start shifting, closed-loop runs."""

import numpy as np
import pytest

from koopmanmpc.estimators import KoopmanBilinearModel, LinearModel
from koopmanmpc.lifting import identity_dictionary, monomial_dictionary
from koopmanmpc.mpc import (BilinearDynamics, LinearMpcController, MpcConfig,
                            PlantDynamics, QpLayout, SqpMpcController,
                            SqpWorkspace, build_linear_mpc_qp, build_sqp_qp,
                            closed_loop_run, knmpc_step, koopman_linearize,
                            nmpc_linearize, shift_warm_start, sqp_solve)
from koopmanmpc.plants import (QuadrotorParams, discrete_step, linear_plant,
                               planar_quadrotor)
from koopmanmpc.qp import solve_qp


def _double_integrator_model(dt):
    A = np.array([[1.0, dt], [0.0, 1.0]])
    B = np.array([[0.5 * dt ** 2], [dt]])
    return LinearModel(A=A, B=B, Cx=np.eye(2),
                       dictionary=identity_dictionary(2), dt=dt)


def _bilinear_toy(rng, dic, m=2, scale=0.05):
    D = dic.dim
    F = np.eye(D) * 0.9
    F[0] = 0.0
    F[0, 0] = 1.0
    G = []
    for _ in range(m):
        G_l = rng.standard_normal((D, D)) * scale
        G_l[0] = 0.0
        G.append(G_l)
    return KoopmanBilinearModel(F=F, G=G, Cx=dic.Cx.copy(), dictionary=dic,
                                dt=0.1)


def _equality_qp_oracle(P, q, A_eq, b_eq):
    """Dense KKT solve for an equality-constrained strictly convex QP."""
    n = P.shape[0]
    k = A_eq.shape[0]
    KKT = np.block([[P, A_eq.T], [A_eq, np.zeros((k, k))]])
    sol = np.linalg.solve(KKT, np.concatenate([-q, b_eq]))
    return sol[:n]


class TestMpcConfig:
    def test_bounds_normalized_to_arrays(self):
        cfg = MpcConfig(horizon=3, dt=0.1, Q=np.eye(2), R=np.eye(1))
        assert np.all(np.isinf(cfg.state_lower))
        assert cfg.input_upper.shape == (1,)

    def test_validation(self):
        with pytest.raises(ValueError):
            MpcConfig(horizon=0, dt=0.1, Q=np.eye(2), R=np.eye(1))
        with pytest.raises(ValueError):
            MpcConfig(horizon=2, dt=0.1, Q=np.eye(2), R=np.eye(1),
                      input_lower=[1.0], input_upper=[0.0])


class TestLinearizations:
    def test_koopman_linearize_matches_finite_differences(self):
        rng = np.random.default_rng(0)
        dic = monomial_dictionary(2, 2)
        model = _bilinear_toy(rng, dic)
        z = dic.lift(rng.standard_normal(2) * 0.4)
        u = rng.standard_normal(2)
        z_next_guess = dic.lift(rng.standard_normal(2) * 0.4)
        st = koopman_linearize(model, z, u, z_next_guess)
        h = 1e-6
        for i in range(dic.dim):
            e = np.zeros(dic.dim)
            e[i] = h
            fd = (model.step(z + e, u) - model.step(z - e, u)) / (2 * h)
            assert np.allclose(st.A[:, i], fd, atol=1e-6)
        for l in range(2):
            e = np.zeros(2)
            e[l] = h
            fd = (model.step(z, u + e) - model.step(z, u - e)) / (2 * h)
            assert np.allclose(st.B[:, l], fd, atol=1e-6)
        # residual is the defect of the guess under the linearization point
        assert np.allclose(st.r, model.step(z, u) - z_next_guess, atol=1e-12)

    def test_nmpc_linearize_residual_is_defect(self):
        params = QuadrotorParams()
        plant = planar_quadrotor(params)
        x = np.array([0.1, -0.2, 0.05, 0.2, -0.1, 0.3])
        u = np.array([9.0, 10.5])
        x_guess = x + 0.01
        st = nmpc_linearize(plant, x, u, x_guess, 0.02, substeps=2)
        x_next = discrete_step(plant, x, u, 0.02, substeps=2)
        assert np.allclose(st.r, x_next - x_guess, atol=1e-12)


class TestLinearMpcQp:
    def test_matches_equality_kkt_oracle(self):
        # no inequality constraints: the stacked QP reduces to an equality-
        # constrained problem solvable exactly by one dense KKT factorization
        dt = 0.1
        model = _double_integrator_model(dt)
        N = 8
        cfg = MpcConfig(horizon=N, dt=dt, Q=np.diag([4.0, 1.0]), R=np.eye(1))
        x0 = np.array([1.0, -0.5])
        qp = build_linear_mpc_qp(model, x0, cfg)
        sol = solve_qp(qp, tol_abs=1e-10, tol_rel=1e-10, max_iter=40000)
        assert sol.solved
        x_ref = _equality_qp_oracle(qp.P.toarray(), qp.q, qp.A.toarray(), qp.l)
        assert np.max(np.abs(sol.x - x_ref)) < 1e-6

    def test_solution_satisfies_dynamics(self):
        dt = 0.1
        model = _double_integrator_model(dt)
        N = 6
        cfg = MpcConfig(horizon=N, dt=dt, Q=np.eye(2), R=np.eye(1),
                        input_lower=[-1.0], input_upper=[1.0])
        qp = build_linear_mpc_qp(model, np.array([2.0, 0.0]), cfg)
        sol = solve_qp(qp, tol_abs=1e-9, tol_rel=1e-9, max_iter=40000)
        assert sol.solved
        Z, U = QpLayout(n=2, m=1, N=N).split(sol.x)
        for k in range(N):
            assert np.allclose(Z[k + 1], model.A @ Z[k] + model.B @ U[k],
                               atol=1e-6)
        assert np.all(U >= -1.0 - 1e-6) and np.all(U <= 1.0 + 1e-6)

    def test_terminal_equality_enforced(self):
        dt = 0.1
        model = _double_integrator_model(dt)
        cfg = MpcConfig(horizon=20, dt=dt, Q=np.zeros((2, 2)), R=np.eye(1),
                        terminal_state=np.array([1.0, 0.0]))
        qp = build_linear_mpc_qp(model, np.zeros(2), cfg)
        sol = solve_qp(qp, tol_abs=1e-9, tol_rel=1e-9, max_iter=40000,
                       rho=100.0, adaptive_rho=False)
        assert sol.solved
        Z, _ = QpLayout(n=2, m=1, N=20).split(sol.x)
        assert np.allclose(Z[-1], [1.0, 0.0], atol=1e-4)


class TestSqpEquivalences:
    def test_one_iteration_equals_linear_mpc_on_linear_system(self):
        # bilinear model with inputs entering only through the constant slot
        # is exactly linear; one full SQP step must land on the dense linear
        # MPC solution from any starting guess
        dt = 0.1
        dic = monomial_dictionary(2, 1)          # observables [1, x0, x1]
        F = np.array([[1.0, 0.0, 0.0],
                      [0.0, 1.0, dt],
                      [0.0, 0.0, 1.0]])
        b = np.array([0.0, 0.5 * dt ** 2, dt])
        G1 = np.outer(b, np.array([1.0, 0.0, 0.0]))
        bimodel = KoopmanBilinearModel(F=F, G=[G1], Cx=dic.Cx.copy(),
                                       dictionary=dic, dt=dt)
        linmodel = LinearModel(A=F, B=b[:, None], Cx=dic.Cx.copy(),
                               dictionary=dic, dt=dt)
        N = 8
        cfg = MpcConfig(horizon=N, dt=dt, Q=np.diag([3.0, 1.0]), R=np.eye(1))
        x0 = np.array([1.0, -0.4])
        qp = build_linear_mpc_qp(linmodel, x0, cfg)
        ref_sol = solve_qp(qp, tol_abs=1e-10, tol_rel=1e-10, max_iter=60000)
        assert ref_sol.solved
        _, U_ref = QpLayout(n=3, m=1, N=N).split(ref_sol.x)

        adapter = BilinearDynamics(bimodel)
        z0 = adapter.lift(x0)
        rng = np.random.default_rng(1)
        ws = SqpWorkspace(x_init=np.repeat(z0[None, :], N + 1, axis=0),
                          u_init=rng.standard_normal((N, 1)) * 0.1,
                          x_ref=np.zeros((N + 1, 2)), u_ref=np.zeros((N, 1)))
        result = sqp_solve(adapter, x0, ws, cfg, max_iter=1,
                           qp_tol=1e-10, qp_max_iter=60000)
        assert np.max(np.abs(result.u - U_ref)) < 1e-6

    def test_sqp_converges_on_true_quadrotor(self):
        params = QuadrotorParams()
        plant = planar_quadrotor(params)
        dt = 0.1
        N = 10
        cfg = MpcConfig(horizon=N, dt=dt, Q=np.eye(6), R=0.01 * np.eye(2),
                        input_lower=np.zeros(2),
                        input_upper=np.full(2, 2 * params.hover_thrust))
        adapter = PlantDynamics(plant, dt, substeps=1)
        x0 = np.array([0.5, 0.3, 0.05, 0.0, 0.0, 0.0])
        hover = np.full((N, 2), params.hover_thrust)
        ws = SqpWorkspace(x_init=np.repeat(x0[None, :], N + 1, axis=0),
                          u_init=hover.copy(),
                          x_ref=np.zeros((N + 1, 6)), u_ref=hover.copy())
        result = sqp_solve(adapter, x0, ws, cfg, tol=1e-5, max_iter=50)
        assert result.status == "converged"
        # converged trajectory satisfies the true discrete dynamics
        for k in range(N):
            x_next = discrete_step(plant, result.x[k], result.u[k], dt, 1)
            assert np.max(np.abs(result.x[k + 1] - x_next)) < 1e-3
        assert np.all(result.u >= -1e-8)
        assert np.all(result.u <= 2 * params.hover_thrust + 1e-8)


class TestWarmStartShift:
    def test_shifted_guess_has_zero_defects(self):
        # after the shift, every stage except the last satisfies the model
        # dynamics exactly, so the linearization residuals vanish
        rng = np.random.default_rng(2)
        dic = monomial_dictionary(2, 2)
        model = _bilinear_toy(rng, dic)
        adapter = BilinearDynamics(model)
        N = 6
        z0 = adapter.lift(rng.standard_normal(2) * 0.3)
        U = rng.standard_normal((N, 2)) * 0.3
        Z = [z0]
        for k in range(N):
            Z.append(adapter.step(Z[-1], U[k]))
        ws = SqpWorkspace(x_init=np.array(Z), u_init=U,
                          x_ref=np.zeros((N + 1, 2)), u_ref=np.zeros((N, 2)))
        shifted = shift_warm_start(ws, adapter.step)
        for k in range(N - 1):
            st = adapter.linearize(shifted.x_init[k], shifted.u_init[k],
                                   shifted.x_init[k + 1])
            assert np.max(np.abs(st.r)) < 1e-12
        assert np.allclose(shifted.u_init[-1], shifted.u_init[-2])
        assert shifted.qp_y is None

    def test_knmpc_step_returns_shifted_workspace(self):
        rng = np.random.default_rng(3)
        dic = monomial_dictionary(2, 2)
        model = _bilinear_toy(rng, dic)
        N = 5
        cfg = MpcConfig(horizon=N, dt=0.1, Q=np.eye(2), R=np.eye(2))
        x0 = rng.standard_normal(2) * 0.2
        z0 = model.lift(x0)
        ws = SqpWorkspace(x_init=np.repeat(z0[None, :], N + 1, axis=0),
                          u_init=np.zeros((N, 2)),
                          x_ref=np.zeros((N + 1, 2)), u_ref=np.zeros((N, 2)))
        u0, shifted, solved = knmpc_step(model, x0, ws, cfg, qp_tol=1e-8)
        assert solved
        assert u0.shape == (2,)
        # shift contract: last input duplicated, final state propagated
        # through the model from the next-to-last shifted state
        assert np.allclose(shifted.u_init[-1], shifted.u_init[-2])
        assert np.allclose(shifted.x_init[-1],
                           model.step(shifted.x_init[-2], shifted.u_init[-1]),
                           atol=1e-12)
        assert shifted.qp_y is not None


class TestControllers:
    def test_linear_mpc_regulates_double_integrator(self):
        dt = 0.1
        model = _double_integrator_model(dt)
        plant = linear_plant(np.array([[0.0, 1.0], [0.0, 0.0]]),
                             np.array([[0.0], [1.0]]))
        cfg = MpcConfig(horizon=15, dt=dt, Q=np.diag([10.0, 1.0]), R=np.eye(1),
                        input_lower=[-2.0], input_upper=[2.0])
        x_ref = np.zeros((1, 2))
        u_ref = np.zeros((1, 1))
        ctrl = LinearMpcController(model, cfg, x_ref, u_ref, qp_tol=1e-7)
        trace = closed_loop_run(plant, ctrl, np.array([1.5, 0.0]), 6.0, dt,
                                cfg, x_ref, u_ref)
        assert not trace.truncated
        assert np.max(np.abs(trace.states[-1])) < 1e-2
        assert np.all(trace.inputs >= -2.0 - 1e-9)
        assert np.all(trace.inputs <= 2.0 + 1e-9)

    def test_sqp_controller_regulates_quadrotor(self):
        params = QuadrotorParams()
        plant = planar_quadrotor(params)
        dt = 0.05
        cfg = MpcConfig(horizon=10, dt=dt, Q=np.diag([10, 10, 10, 1, 1, 1]),
                        R=0.01 * np.eye(2), input_lower=np.zeros(2),
                        input_upper=np.full(2, 2 * params.hover_thrust))
        x_ref = np.zeros((1, 6))
        u_ref = np.full((1, 2), params.hover_thrust)
        adapter = PlantDynamics(plant, dt, substeps=1)
        ctrl = SqpMpcController(adapter, cfg, x_ref, u_ref)
        x0 = np.array([0.3, -0.2, 0.05, 0.0, 0.0, 0.0])
        ctrl.initialize(x0)
        trace = closed_loop_run(plant, ctrl, x0, 4.0, dt, cfg, x_ref, u_ref)
        assert not trace.truncated
        assert np.max(np.abs(trace.states[-1][:3])) < 0.05
        assert np.all(trace.inputs >= -1e-9)
        assert np.all(trace.inputs <= 2 * params.hover_thrust + 1e-9)

    def test_trace_csv_written(self, tmp_path):
        trace_path = tmp_path / "trace.csv"
        dt = 0.1
        model = _double_integrator_model(dt)
        plant = linear_plant(np.array([[0.0, 1.0], [0.0, 0.0]]),
                             np.array([[0.0], [1.0]]))
        cfg = MpcConfig(horizon=5, dt=dt, Q=np.eye(2), R=np.eye(1))
        ctrl = LinearMpcController(model, cfg, np.zeros((1, 2)), np.zeros((1, 1)))
        trace = closed_loop_run(plant, ctrl, np.array([0.5, 0.0]), 1.0, dt,
                                cfg, np.zeros((1, 2)), np.zeros((1, 1)))
        trace.to_csv(trace_path)
        lines = trace_path.read_text().splitlines()
        assert lines[0].startswith("t,x0,x1,u0,solve_ms,stage_cost")
        assert len(lines) == trace.states.shape[0] + 1
        assert trace.realized_cost > 0

    def test_closed_loop_truncates_on_divergence(self):
        # unstable plant with a do-nothing controller blows past the guard
        plant = linear_plant(np.array([[2.0]]), np.zeros((1, 1)))

        class Hold:
            def step(self, x, k):
                return np.zeros(1)

        cfg = MpcConfig(horizon=2, dt=0.5, Q=np.eye(1), R=np.eye(1))
        trace = closed_loop_run(plant, Hold(), np.array([1.0]), 10.0, 0.5,
                                cfg, np.zeros((1, 1)), np.zeros((1, 1)))
        assert trace.truncated
        assert trace.states.shape[0] < 21
