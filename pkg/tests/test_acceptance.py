"""Acceptance criteria, each at its stated tolerance and runtime budget.

Every test prints one ``criterion N: PASS|FAIL`` line (visible with ``-s`` or in
the terminal summary) before asserting.
"""
import filecmp
import math
import time

import numpy as np

from bandit_control.baselines import best_drc_hindsight, dare_residual, dare_solve
from bandit_control.bco import Ebco, EbcoConfig, grad_estimate
from bandit_control.control import EbpcConfig, make_ebpc_config, run_ebpc, run_ebpc_unknown
from bandit_control.geometry import ConstraintSet, barrier_precond, sample_unit_sphere
from bandit_control.harness import default_config_dict, emit_csv, parse_config, run_experiment
from bandit_control.lds import (CostSpec, LdsParams, MarkovOperator, NoiseParams, NoiseTrace, ceil_sqrt,
                                double_integrator, make_noise, markov_operator, natures_y_rollout,
                                spectral_radius)
from bandit_control.sysid import estimation_error, run_estimation_phase, sysest_ls

RESULTS = {}


def _report(number, ok, detail, elapsed, budget):
    ok = bool(ok) and elapsed < budget
    line = (f"criterion {number}: {'PASS' if ok else 'FAIL'}  {detail}  "
            f"[{elapsed:.1f}s / {budget:.0f}s]")
    RESULTS[number] = line
    print(line)
    assert ok, line


# ---------------------------------------------------------------------------
# 1. Feasibility
# ---------------------------------------------------------------------------

def _memory_quadratic_run(cset, T, seed):
    """EBCO-M on drifting quadratic losses with memory; returns the worst violation."""
    n, H = cset.n, 3
    rng = np.random.default_rng(seed)
    targets = 2.0 * rng.standard_normal((T, n))
    cfg = EbcoConfig(n=n, H=H, T=T, eta=5.0 / math.sqrt(T), sigma=0.5, set=cset)
    opt = Ebco(cfg, np.random.default_rng(seed + 1))
    plays = []
    worst = 0.0
    for t in range(T):
        y = opt.play()
        plays.append(y)
        if cset.kind == "ball":
            worst = max(worst, float(np.linalg.norm(y - cset.center) - cset.radius))
        else:
            worst = max(worst, float(np.max(cset.lower - y)), float(np.max(y - cset.upper)))
        recent = plays[-H:]
        m = sum(recent) / len(recent)
        opt.feedback(float(np.sum((m - targets[t]) ** 2)))
    return worst


def test_criterion_1_feasibility():
    t0 = time.perf_counter()
    ball = ConstraintSet.ball(np.zeros(4), 1.0)
    box = ConstraintSet.box(-np.ones(3), np.array([1.0, 2.0, 0.5]))
    v_ball = _memory_quadratic_run(ball, 10_000, 0)
    v_box = _memory_quadratic_run(box, 10_000, 1)

    di = double_integrator()
    costs = CostSpec.identity(2, 1)
    K = dare_solve(di.A, di.B, costs.Q, costs.R).K
    loop = di.closed_loop(K)
    trace = make_noise("sinusoidal", NoiseParams(), 2000, 5, 2, 2)
    R = 1.0
    cfg = make_ebpc_config(loop, costs, 5, R, 2000, 0.1, 0.1, c_eta=100.0)
    res = run_ebpc(di, trace, costs, cfg, np.random.default_rng(5), stabilizer=K)
    l1_max = float(np.max(res.extras["policy_l1_op"]))
    elapsed = time.perf_counter() - t0
    ok = v_ball <= 1e-10 and v_box <= 1e-10 and l1_max <= R + 1e-9
    _report(1, ok, f"ball excess {v_ball:.2e}, box excess {v_box:.2e}, "
                   f"max l1-op {l1_max:.4f} <= {R}", elapsed, 60)


# ---------------------------------------------------------------------------
# 2. Estimator unbiasedness
# ---------------------------------------------------------------------------

def test_criterion_2_unbiased_estimator():
    t0 = time.perf_counter()
    n, H, draws = 4, 2, 100_000
    rng = np.random.default_rng(2024)
    cset = ConstraintSet.ball(np.zeros(n), 1.0)
    # F(y_{t-1}, y_t) = |P1 y_{t-1} + P2 y_t - c|^2 with fixed P1, P2, c
    P1 = rng.standard_normal((n, n))
    P2 = rng.standard_normal((n, n))
    c = rng.standard_normal(n)
    centers = [0.3 * sample_unit_sphere(n, rng), 0.6 * sample_unit_sphere(n, rng)]
    pre = [barrier_precond(cset, x, 0.5 * (i + 1)) for i, x in enumerate(centers)]
    A_inv = [p.A_inv for p in pre]

    def F(y_prev, y_now):
        r = P1 @ y_prev + P2 @ y_now - c
        return float(r @ r)

    r0 = P1 @ centers[0] + P2 @ centers[1] - c
    target = 2.0 * P1.T @ r0 + 2.0 * P2.T @ r0  # sum over memory slots of the partial gradients

    samples = np.empty((draws, n))
    for k in range(draws):
        us = [sample_unit_sphere(n, rng) for _ in range(H)]
        ys = [x + p.A @ u for x, p, u in zip(centers, pre, us)]
        samples[k] = grad_estimate(F(*ys), A_inv, us, n, H)
    mean = samples.mean(axis=0)
    se = samples.std(axis=0, ddof=1) / math.sqrt(draws)
    z = np.abs(mean - target) / se
    elapsed = time.perf_counter() - t0
    _report(2, np.all(z <= 3.0), f"max |mean - grad| / SE = {z.max():.2f} (<= 3)", elapsed, 120)


# ---------------------------------------------------------------------------
# 3. Delayed dependence
# ---------------------------------------------------------------------------

def test_criterion_3_delayed_dependence():
    t0 = time.perf_counter()
    n, H = 3, 4
    cset = ConstraintSet.ball(np.zeros(n), 1.0)
    cfg = EbcoConfig(n=n, H=H, T=200, eta=0.3, sigma=1.0, set=cset)
    rng = np.random.default_rng(3)
    targets = rng.standard_normal((200, n))
    opt = Ebco(cfg, np.random.default_rng(30))

    def step(o, t):
        y = o.play()
        o.feedback(float(np.sum((y - targets[t]) ** 2)))

    for t in range(20):
        step(opt, t)
    s = opt.t
    alt = Ebco(cfg)
    alt.state = opt.state.snapshot()
    # redraw the noises of the last H-1 played steps and the current one
    redraw = np.random.default_rng(99)
    for k in range(s - H + 1, s + 1):
        alt.state.set_noise(k, sample_unit_sphere(n, redraw))
    alt.state.rng = np.random.default_rng(12345)
    for t in range(20, 20 + H):
        step(opt, t)
        step(alt, t)
    same = all(np.array_equal(opt.state.center(k), alt.state.center(k))
               for k in range(s + 1, s + H))
    moved = not np.array_equal(opt.state.center(s + H), alt.state.center(s + H))
    elapsed = time.perf_counter() - t0
    _report(3, same and moved, f"centers x_{s + 1}..x_{s + H - 1} bitwise equal: {same}; "
                               f"x_{s + H} changes: {moved}", elapsed, 10)


# ---------------------------------------------------------------------------
# 4. Sublinear regret
# ---------------------------------------------------------------------------

def _regret_per_step(T, seed, n=4, H=3):
    rng = np.random.default_rng(seed)
    c = rng.standard_normal(n)
    c *= 0.5 / np.linalg.norm(c)
    targets = c + 0.3 * rng.standard_normal((T, n))
    cfg = EbcoConfig(n=n, H=H, T=T, eta=1.0 / math.sqrt(T), sigma=1.0,
                     set=ConstraintSet.ball(np.zeros(n), 1.0))
    opt = Ebco(cfg, np.random.default_rng(seed + 1000))
    plays = []
    total = 0.0
    for t in range(T):
        plays.append(opt.play())
        if t >= H - 1:
            m = sum(plays[-H:]) / H
            loss = float(np.sum((m - targets[t]) ** 2))
            total += loss
        else:
            loss = 0.0
        opt.feedback(loss)
    tail = targets[H - 1:]
    best = float(np.sum((tail - tail.mean(axis=0)) ** 2))  # best fixed point, inside the ball
    return (total - best) / T


def test_criterion_4_sublinear_regret():
    t0 = time.perf_counter()
    r1 = np.mean([_regret_per_step(1024, s) for s in range(8)])
    r4 = np.mean([_regret_per_step(4096, s) for s in range(8)])
    ratio = r4 / r1
    elapsed = time.perf_counter() - t0
    _report(4, ratio <= 0.7, f"regret/T {r1:.4f} (T=1024) -> {r4:.4f} (T=4096), "
                             f"ratio {ratio:.3f} <= 0.7", elapsed, 120)


# ---------------------------------------------------------------------------
# 5, 6. Double integrator experiments
# ---------------------------------------------------------------------------

def _final_quarter(noise):
    raw = default_config_dict()
    raw.update({"noise": {**raw["noise"], "kind": noise},
                "controllers": [{"kind": "ebpc_known"}, {"kind": "lqr"}], "oracle": False})
    report = run_experiment(parse_config(raw))
    out = {}
    for label in ("ebpc_known", "lqr"):
        out[label] = float(np.mean([r.final_quarter_mean() for r in report.select(noise, label)]))
    return out


def test_criterion_5_gaussian_tracks_lqr():
    t0 = time.perf_counter()
    fq = _final_quarter("gaussian")
    ratio = fq["ebpc_known"] / fq["lqr"]
    elapsed = time.perf_counter() - t0
    _report(5, ratio <= 1.25, f"final-quarter loss EBPC {fq['ebpc_known']:.4f} vs LQR "
                              f"{fq['lqr']:.4f}, ratio {ratio:.3f} <= 1.25", elapsed, 180)


def test_criterion_6_sinusoidal_beats_lqr():
    t0 = time.perf_counter()
    fq = _final_quarter("sinusoidal")
    elapsed = time.perf_counter() - t0
    _report(6, fq["ebpc_known"] < fq["lqr"], f"final-quarter loss EBPC {fq['ebpc_known']:.4f} "
                                             f"< LQR {fq['lqr']:.4f}", elapsed, 180)


# ---------------------------------------------------------------------------
# 7. System identification
# ---------------------------------------------------------------------------

def test_criterion_7_sysid():
    t0 = time.perf_counter()
    rng = np.random.default_rng(7)
    G = rng.standard_normal((3, 2, 2))
    U = rng.standard_normal((400, 2))
    Y = np.zeros((400, 2))
    for t in range(400):
        for i in range(min(3, t + 1)):
            Y[t] += G[i] @ U[t - i]
    exact = estimation_error(sysest_ls(Y, U, 5).G_hat,
                             markov_operator_from_blocks(G, 5))

    di = double_integrator()
    H = 5
    G_true = markov_operator(di, H)
    params = NoiseParams(sigma_w=0.1, sigma_e=0.1)
    med = {}
    for N in (1600, 6400):
        errs = []
        for s in range(20):
            trace = make_noise("gaussian", params, N, 500 + s, 2, 2)
            rep, _ = run_estimation_phase(di, trace, N, H, np.random.default_rng(s),
                                          G_true=G_true)
            errs.append(rep.err_l1_op)
        med[N] = float(np.median(errs))
    ratio = med[6400] / med[1600]
    elapsed = time.perf_counter() - t0
    _report(7, exact <= 1e-6 and ratio <= 0.6,
            f"noiseless error {exact:.1e}; median error {med[1600]:.4f} (N=1600) -> "
            f"{med[6400]:.4f} (N=6400), ratio {ratio:.3f} <= 0.6", elapsed, 60)


def markov_operator_from_blocks(blocks, H):
    padded = np.zeros((H,) + blocks.shape[1:])
    padded[: blocks.shape[0]] = blocks
    return MarkovOperator(padded)


# ---------------------------------------------------------------------------
# 8. Unknown system end to end
# ---------------------------------------------------------------------------

def test_criterion_8_unknown_matches_known():
    t0 = time.perf_counter()
    # nilpotent plant: the Markov operator has finite memory, so least squares is exact
    sys = LdsParams([[0.0, 1.0], [0.0, 0.0]], [[0.0], [1.0]], np.eye(2))
    costs = CostSpec.identity(2, 1)
    T, base_H, seed = 1600, 5, 8
    N = ceil_sqrt(T)
    noisy = make_noise("sinusoidal", NoiseParams(), T, seed, 2, 2)
    keep = (np.arange(T) >= N)[:, None]
    trace = NoiseTrace(noisy.w_adv * keep, noisy.w_stoch * keep, noisy.e_adv * keep,
                       noisy.e_stoch * keep)
    res = run_ebpc_unknown(sys, trace, costs, base_H, 1.0, rng=np.random.default_rng(seed),
                           c_eta=20.0, sigma_e=0.1)

    est_rng, ctrl_rng = np.random.default_rng(seed).spawn(2)
    _, log = run_estimation_phase(sys, trace.slice(0, N), N, 3 * base_H, est_rng, costs)
    used = res.extras["config"]
    cfg = EbpcConfig(H=3 * base_H, R=2.0, T=T - N, G=markov_operator(sys, 3 * base_H),
                     eta=used.eta, sigma=used.sigma, mode="unknown")
    ref = run_ebpc(sys, trace.slice(N, T), costs, cfg, ctrl_rng, x0=log["final_state"],
                   history=(log["observations"], log["excitation"]))
    diff = float(np.max(np.abs(res.cost[N:] - ref.cost)))
    g_err = res.extras["estimation"].err_l1_op
    elapsed = time.perf_counter() - t0
    _report(8, diff <= 1e-8 and np.array_equal(res.cost[:N], log["cost"]),
            f"estimate error {g_err:.1e}; max per-step cost gap {diff:.2e} <= 1e-8 "
            f"over {T - N} control steps", elapsed, 60)


# ---------------------------------------------------------------------------
# 9. Oracles
# ---------------------------------------------------------------------------

def test_criterion_9_oracles():
    t0 = time.perf_counter()
    rng = np.random.default_rng(9)
    worst_res, worst_rho = 0.0, 0.0
    count = 0
    while count < 50:
        dx, du = int(rng.integers(2, 6)), int(rng.integers(1, 4))
        A = rng.standard_normal((dx, dx)) * rng.uniform(0.3, 0.8)
        B = rng.standard_normal((dx, du))
        ctrb = np.hstack([np.linalg.matrix_power(A, k) @ B for k in range(dx)])
        if np.linalg.matrix_rank(ctrb) < dx:
            continue  # keep controllable (hence stabilisable) draws
        Q = np.eye(dx)
        R = np.eye(du) * rng.uniform(0.5, 2.0)
        g = dare_solve(A, B, Q, R)
        worst_res = max(worst_res, dare_residual(A, B, Q, R, g.P))
        worst_rho = max(worst_rho, spectral_radius(A + B @ g.K))
        count += 1

    d, H, T = 2, 2, 300
    sys = LdsParams(np.zeros((d, d)), np.eye(d), np.eye(d))
    costs = CostSpec.identity(d, d)
    w = np.tile([0.4, -0.3], (T, 1))
    e = 0.2 * rng.standard_normal((T, d))
    trace = NoiseTrace(w, np.zeros_like(w), e, np.zeros_like(e))
    ynat = natures_y_rollout(sys, trace)
    m_ls = _closed_form_drc(ynat, d, H)
    radius = 10.0 * math.sqrt(H) * np.linalg.norm(m_ls)
    res = best_drc_hindsight(markov_operator(sys, H), ynat, costs, H, radius)
    gap = float(np.max(np.abs(res.M.M.ravel() - m_ls)))
    elapsed = time.perf_counter() - t0
    _report(9, worst_res <= 1e-8 and worst_rho < 1 and gap <= 1e-6,
            f"50 DARE: max residual {worst_res:.1e}, max closed-loop radius {worst_rho:.3f}; "
            f"hindsight vs least squares {gap:.1e}", elapsed, 60)


def _closed_form_drc(ynat, d, H):
    """Normal-equation solve for A=0, B=I, C=I: y_t = ynat_t + u_{t-1}, u_t = sum_j M^[j] ynat_{t-j}."""
    T = ynat.shape[0]
    n = H * d * d

    def design(s):
        D = np.zeros((d, n))
        if s < 0:
            return D
        for j in range(H):
            if s - j >= 0:
                for a in range(d):
                    D[a, j * d * d + a * d: j * d * d + (a + 1) * d] = ynat[s - j]
        return D

    rows = [np.vstack([design(t - 1), design(t)]) for t in range(T)]
    rhs = [np.concatenate([-ynat[t], np.zeros(d)]) for t in range(T)]
    X, b = np.vstack(rows), np.concatenate(rhs)
    return np.linalg.solve(X.T @ X, X.T @ b)


# ---------------------------------------------------------------------------
# 10. Determinism
# ---------------------------------------------------------------------------

def test_criterion_10_determinism(tmp_path):
    t0 = time.perf_counter()
    config = parse_config(default_config_dict())
    emit_csv(run_experiment(config, threads=1), tmp_path / "a")
    emit_csv(run_experiment(config, threads=4), tmp_path / "b")
    files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*.csv"))
    match, mismatch, errors = filecmp.cmpfiles(tmp_path / "a", tmp_path / "b",
                                               [str(f) for f in files], shallow=False)
    elapsed = time.perf_counter() - t0
    _report(10, not mismatch and not errors and len(match) == len(files) > 0,
            f"{len(match)}/{len(files)} CSV files byte-identical across 1 and 4 threads",
            elapsed, 360)
