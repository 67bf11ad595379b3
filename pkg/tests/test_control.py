import math

import numpy as np
import pytest

from bandit_control.bco import grad_estimate
from bandit_control.control import (Ebpc, EbpcConfig, OutOfOrderError, ebpc_step, eta_default,
                                    make_ebpc_config, run_ebpc, run_ebpc_unknown,
                                    sigma_default_known, sigma_default_unknown, theory_memory)
from bandit_control.lds import (CostSpec, LdsParams, NoiseParams, NoiseTrace, ceil_sqrt,
                                cost_eval, make_noise, markov_operator, recover_natures_y_series)
from bandit_control.policy import drc_control, unflatten

from conftest import random_stable


def _zero_trace(T, d_x, d_y):
    z = lambda d: np.zeros((T, d))  # noqa: E731
    return NoiseTrace(z(d_x), z(d_x), z(d_y), z(d_y))


def _config(system, costs, H=3, R=1.0, T=200, c_eta=1.0, **kw):
    return make_ebpc_config(system, costs, H, R, T, sigma_w=0.1, sigma_e=0.1, c_eta=c_eta, **kw)


class TestDefaults:
    def test_sigma_known_without_process_noise(self, di):
        assert sigma_default_known(di, 2.0, 0.5, 0.0) == pytest.approx(2.0 * 0.25)

    def test_sigma_known_arithmetic(self):
        sys = LdsParams(np.zeros((2, 2)), np.eye(2), np.eye(2))
        assert sigma_default_known(sys, 1.0, 1.0, 1.0) == pytest.approx(2.0)

    def test_sigma_known_double_integrator(self):
        A = np.array([[1.0, 1.0], [0.0, 1.0]])
        sys = LdsParams(A, np.array([[0.0], [1.0]]), np.eye(2))
        # ||A||_op^2 is the largest eigenvalue of A'A = [[1,1],[1,2]]: (3 + sqrt 5) / 2
        a_op2 = (3 + math.sqrt(5)) / 2
        expected = 1.5 * (0.2 ** 2 + 0.3 * 1.0 / (1 + a_op2))
        assert sigma_default_known(sys, 1.5, 0.2, 0.3) == pytest.approx(expected, rel=1e-12)

    def test_sigma_known_squared_variant(self, di):
        a = sigma_default_known(di, 1.0, 0.1, 0.3, square_w=True)
        b = sigma_default_known(di, 1.0, 0.1, 0.09)
        assert a == pytest.approx(b, rel=1e-12)

    def test_sigma_unknown(self, di):
        assert sigma_default_unknown(8.0, 1.0) == pytest.approx(1.0)
        assert sigma_default_unknown(1.0, 2.0) == pytest.approx(0.5)
        assert sigma_default_unknown(3.0, 0.7) == pytest.approx(
            sigma_default_known(di, 3.0, 0.7, 0.0) / 8)

    def test_eta(self):
        assert eta_default(1, 1, 1.0, 1, 4) == pytest.approx(0.5)
        assert eta_default(1, 2, 2.0, 5, 10 ** 4) == pytest.approx(2e-5)
        assert eta_default(2, 3, 1.0, 2, 200) / eta_default(2, 3, 1.0, 2, 400) == pytest.approx(
            math.sqrt(2))
        assert eta_default(1, 1, 1.0, 1, 4, c_eta=3.0) == pytest.approx(1.5)

    def test_theory_memory(self):
        assert theory_memory(10) == 6
        assert theory_memory(10 ** 6) == 10
        assert theory_memory(1) == 1


class TestConfig:
    def test_set_radius_and_dimension(self, di):
        cfg = _config(di, CostSpec.identity(2, 1), H=4, R=2.0)
        assert cfg.n == 4 * 1 * 2
        assert cfg.set.radius == pytest.approx(1.0)
        assert cfg.G.H_G == 4

    def test_degenerate_noise_floors_sigma(self, di):
        with pytest.warns(RuntimeWarning, match="degenerate noise"):
            cfg = make_ebpc_config(di, CostSpec.identity(2, 1), 3, 1.0, 100, 0.0, 0.0)
        assert cfg.sigma > 0

    def test_bad_mode(self, di):
        with pytest.raises(ValueError, match="mode"):
            _config(di, CostSpec.identity(2, 1), mode="oracle")


class TestController:
    def test_burn_in_controls_zero(self, di, rng):
        cfg = _config(di, CostSpec.identity(2, 1), H=4)
        ctrl = Ebpc(cfg, rng)
        for t in range(3):
            u = ebpc_step(ctrl, rng.standard_normal(2) * 100, lambda u: 5.0)
            assert np.array_equal(u, np.zeros(1))
        u = ctrl.act(np.ones(2))
        assert np.any(u != 0)

    def test_out_of_order(self, di, rng):
        ctrl = Ebpc(_config(di, CostSpec.identity(2, 1)), rng)
        with pytest.raises(OutOfOrderError):
            ctrl.feedback(1.0)
        ctrl.act(np.zeros(2))
        with pytest.raises(OutOfOrderError):
            ctrl.act(np.zeros(2))

    def test_zero_cost_never_moves(self, di, rng):
        cfg = _config(di, CostSpec.identity(2, 1), H=3)
        ctrl = Ebpc(cfg, rng)
        x0 = ctrl.bco.state.center(1).copy()
        for _ in range(30):
            ebpc_step(ctrl, rng.standard_normal(2), lambda u: 0.0)
            assert np.array_equal(ctrl.bco.state.center(ctrl.t), x0)

    def test_gradient_scale(self, di, rng):
        cfg = _config(di, CostSpec.identity(2, 1), H=3)
        ctrl = Ebpc(cfg, rng)
        for t in range(1, 12):
            st = ctrl.bco.state
            y = rng.standard_normal(2)
            ctrl.act(y)
            if t >= cfg.H:
                A_inv = [A.A_inv for k, A in st.A_hist if k > t - cfg.H]
                us = [u for k, u in st.u_hist if k > t - cfg.H]
                expected = grad_estimate(2.5, A_inv, us, cfg.H * cfg.d_u * cfg.d_y, cfg.H)
            ctrl.feedback(2.5)
            if t >= cfg.H:
                assert np.array_equal(ctrl.bco.state.g_log[-1], expected)

    def test_warm_start_recovers_with_history(self, rng):
        sys = random_stable(rng, 3, 2, 2)
        cfg = _config(sys, CostSpec.identity(2, 2), H=4)
        Y = rng.standard_normal((5, 2))
        U = rng.standard_normal((5, 2))
        ctrl = Ebpc(cfg, rng)
        ctrl.warm_start(Y, U)
        y = rng.standard_normal(2)
        ctrl.act(y)
        G = cfg.G.blocks
        expected = y - G[1] @ U[4] - G[2] @ U[3] - G[3] @ U[2]
        np.testing.assert_allclose(ctrl.ynat_log[-1], expected, rtol=1e-13, atol=1e-14)


class TestRunEbpc:
    def test_zero_noise_zero_cost(self, di, rng):
        costs = CostSpec.identity(2, 1)
        res = run_ebpc(di, _zero_trace(100, 2, 2), costs, _config(di, costs, T=100), rng)
        assert res.total_cost == 0.0
        assert np.all(res.controls == 0.0)
        assert np.all(res.extras["ynat"] == 0.0)

    def test_feasibility_and_logs(self, di):
        costs = CostSpec.identity(2, 1)
        trace = make_noise("sinusoidal", NoiseParams(), 400, 3, 2, 2)
        cfg = _config(di, costs, H=4, R=1.5, T=400, c_eta=50.0)
        res = run_ebpc(di, trace, costs, cfg, np.random.default_rng(1))
        assert np.all(res.extras["policy_l1_op"] <= 1.5 + 1e-9)
        assert np.all(res.policy_fro_norm <= 1.5 / 2 + 1e-9)
        assert np.all(res.controls[:3] == 0.0)
        np.testing.assert_allclose(res.cost, [cost_eval(costs, t + 1, res.observations[t],
                                                        res.controls[t]) for t in range(400)])
        np.testing.assert_allclose(res.control_norm, np.linalg.norm(res.controls, axis=1))
        assert res.phase == ["ctrl"] * 400

    def test_ynat_matches_offline_recovery(self, rng):
        sys = random_stable(rng, 4, 2, 3, rho=0.9)
        costs = CostSpec.identity(3, 2)
        trace = make_noise("gaussian", NoiseParams(), 300, 11, 4, 3)
        cfg = _config(sys, costs, H=5, T=300)
        res = run_ebpc(sys, trace, costs, cfg, np.random.default_rng(2))
        offline = recover_natures_y_series(res.observations, res.controls, markov_operator(sys, 5))
        np.testing.assert_allclose(res.extras["ynat"], offline, atol=1e-10)

    def test_deterministic(self, di):
        costs = CostSpec.identity(2, 1)
        trace = make_noise("gaussian_walk", NoiseParams(), 200, 5, 2, 2)
        cfg = _config(di, costs, T=200)
        a = run_ebpc(di, trace, costs, cfg, np.random.default_rng(9))
        b = run_ebpc(di, trace, costs, cfg, np.random.default_rng(9))
        assert a.to_csv() == b.to_csv()

    def test_reduces_to_bandit_quadratic_optimisation(self, rng):
        # A = 0, B = I, C = I: y_t = u_{t-1} + w_{t-1} + e_t and y^nat_t = w_{t-1} + e_t.
        # Drive the optimizer directly on that closed form and compare the losses.
        d, H, T = 2, 2, 150
        sys = LdsParams(np.zeros((d, d)), np.eye(d), np.eye(d))
        costs = CostSpec(np.diag([1.0, 2.0]), 0.5 * np.eye(d))
        trace = make_noise("gaussian", NoiseParams(sigma_w=0.5, sigma_e=0.2), T, 4, d, d)
        cfg = _config(sys, costs, H=H, R=1.0, T=T, c_eta=20.0)
        res = run_ebpc(sys, trace, costs, cfg, np.random.default_rng(7))

        from bandit_control.bco import Ebco
        opt = Ebco(cfg.bco_config(), np.random.default_rng(7))
        w, e = trace.w, trace.e
        ynat = e.copy()
        ynat[1:] += w[:-1]
        u_prev = np.zeros(d)
        losses = []
        for t in range(T):
            M = unflatten(opt.play(), H, d, d)
            recent = np.zeros((H, d))
            for j in range(H):
                if t - j >= 0:
                    recent[j] = ynat[t - j]
            u = np.zeros(d) if t < H - 1 else drc_control(M, recent)
            y = ynat[t] + u_prev
            c = float(y @ costs.Q @ y + u @ costs.R @ u)
            opt.feedback(c)
            losses.append(c)
            u_prev = u
        np.testing.assert_allclose(res.cost, losses, rtol=1e-9, atol=1e-12)

    def test_stabilizer_adds_feedback(self, di, rng):
        from bandit_control.baselines import dare_solve
        costs = CostSpec.identity(2, 1)
        K = dare_solve(di.A, di.B, np.eye(2), np.eye(1)).K
        loop = di.closed_loop(K)
        trace = make_noise("gaussian", NoiseParams(), 150, 2, 2, 2)
        cfg = _config(loop, costs, T=150)
        res = run_ebpc(di, trace, costs, cfg, np.random.default_rng(0), stabilizer=K)
        v = res.extras["excitation"]
        np.testing.assert_allclose(res.controls, v + res.observations @ K.T, atol=1e-12)
        offline = recover_natures_y_series(res.observations, v, markov_operator(loop, cfg.H))
        np.testing.assert_allclose(res.extras["ynat"], offline, atol=1e-10)


def _nilpotent():
    A = np.array([[0.0, 1.0], [0.0, 0.0]])
    return LdsParams(A, np.array([[0.0], [1.0]]), np.eye(2))


class TestUnknown:
    def test_sample_size(self):
        assert ceil_sqrt(100) == 10
        assert ceil_sqrt(101) == 11

    def test_requires_horizon(self, di):
        with pytest.raises(ValueError):
            run_ebpc_unknown(di, _zero_trace(3, 2, 2), CostSpec.identity(2, 1), 2, 1.0,
                             rng=np.random.default_rng(0))

    @pytest.mark.filterwarnings("ignore:N=10")
    def test_phases_and_config(self, di):
        costs = CostSpec.identity(2, 1)
        trace = make_noise("gaussian", NoiseParams(), 100, 0, 2, 2)
        res = run_ebpc_unknown(di, trace, costs, 2, 1.0, rng=np.random.default_rng(0))
        assert res.phase == ["est"] * 10 + ["ctrl"] * 90
        cfg = res.extras["config"]
        assert (cfg.H, cfg.R, cfg.mode, cfg.T) == (6, 2.0, "unknown", 90)
        assert cfg.sigma == pytest.approx(sigma_default_unknown(costs.sigma_c, 0.1))

    @pytest.mark.filterwarnings("ignore:N=10")
    def test_phase_one_controls_are_gaussian_draws(self, di):
        trace = make_noise("gaussian", NoiseParams(), 100, 0, 2, 2)
        res = run_ebpc_unknown(di, trace, CostSpec.identity(2, 1), 2, 1.0,
                               rng=np.random.default_rng(42))
        est_rng, _ = np.random.default_rng(42).spawn(2)
        np.testing.assert_array_equal(res.controls[:10], est_rng.standard_normal((10, 1)))

    def test_exact_estimate_matches_known_run(self):
        sys = _nilpotent()
        costs = CostSpec.identity(2, 1)
        T, base_H = 400, 2
        N = ceil_sqrt(T)
        noisy = make_noise("gaussian", NoiseParams(), T, 8, 2, 2)
        keep = np.arange(T)[:, None] >= N
        trace = NoiseTrace(noisy.w_adv * keep, noisy.w_stoch * keep, noisy.e_adv * keep,
                           noisy.e_stoch * keep)
        rng = np.random.default_rng(5)
        res = run_ebpc_unknown(sys, trace, costs, base_H, 1.0, rng=rng)
        report = res.extras["estimation"]
        assert report.err_l1_op <= 1e-8

        est_rng, ctrl_rng = np.random.default_rng(5).spawn(2)
        V = est_rng.standard_normal((N, 1))
        x = np.zeros(2)
        Y = np.empty((N, 2))
        for t in range(N):
            Y[t] = sys.C @ x
            x = sys.A @ x + sys.B @ V[t]
        cfg = EbpcConfig(H=3 * base_H, R=2.0, T=T - N, G=markov_operator(sys, 3 * base_H),
                         eta=res.extras["config"].eta, sigma=res.extras["config"].sigma,
                         mode="unknown")
        ref = run_ebpc(sys, trace.slice(N, T), costs, cfg, ctrl_rng, x0=x, history=(Y, V))
        np.testing.assert_allclose(res.cost[N:], ref.cost, rtol=1e-6, atol=1e-10)
        assert np.all(res.extras["policy_l1_op"] <= 2.0 + 1e-9)
