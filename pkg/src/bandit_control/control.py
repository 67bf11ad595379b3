"""Bandit perturbation controller (EBPC) for known and estimated systems.

The controller runs the ellipsoidal bandit optimizer over flattened DRC
parameters. Each step it recovers nature's y from the observation and the
previous controls, plays u_t = sum_j M~_t^[j] y^nat_{t-j} (zero during the
first H-1 steps), and forwards the scalar cost as the optimizer's loss.
"""
import math
import warnings
from collections import deque
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .bco import Ebco, EbcoConfig
from .geometry import ConstraintSet
from .lds import (CostSpec, LdsParams, MarkovOperator, NoiseTrace, ceil_sqrt, cost_eval,
                  markov_operator)
from .policy import drc_control, l1_op_norm, unflatten
from .results import TrialResult
from .sysid import estimation_trial, run_estimation_phase


def sigma_default_known(params: LdsParams, sigma_c: float, sigma_e: float, sigma_w: float,
                        square_w: bool = False) -> float:
    """sigma_c * (sigma_e^2 + s_w * sigma_min(C) / (1 + ||A||_op^2)), s_w = sigma_w (or sigma_w^2)."""
    s_min = float(np.linalg.svd(params.C, compute_uv=False).min())
    a_op = float(np.linalg.norm(params.A, 2))
    s_w = sigma_w ** 2 if square_w else sigma_w
    return sigma_c * (sigma_e ** 2 + s_w * s_min / (1.0 + a_op ** 2))


def sigma_default_unknown(sigma_c: float, sigma_e: float) -> float:
    return sigma_c * sigma_e ** 2 / 8.0


def eta_default(d_u: int, d_y: int, L_c: float, H: int, T: int, c_eta: float = 1.0) -> float:
    return c_eta / (d_u * d_y * L_c * H ** 3 * math.sqrt(T))


SIGMA_FLOOR = 1e-8


def _positive_sigma(sigma: float) -> float:
    # zero noise makes the default vanish; the optimizer needs sigma > 0
    if sigma > 0:
        return sigma
    warnings.warn(f"default sigma is {sigma:g} (degenerate noise); using {SIGMA_FLOOR:g}",
                  RuntimeWarning)
    return SIGMA_FLOOR


def theory_memory(T: int, cap: int = 10) -> int:
    """H = ceil(log^2 T), capped."""
    return int(min(cap, max(1, math.ceil(math.log(max(T, 2)) ** 2))))


@dataclass
class EbpcConfig:
    H: int
    R: float
    T: int
    G: MarkovOperator
    eta: float
    sigma: float
    mode: str = "known"
    H_G: Optional[int] = None
    prox_coef: float = 0.5
    newton_tol: float = 1e-9
    max_iters: int = 100

    def __post_init__(self):
        if self.mode not in ("known", "unknown"):
            raise ValueError(f"mode must be 'known' or 'unknown', got {self.mode!r}")
        if self.H_G is None:
            self.H_G = self.H
        self.G = self.G.truncated(self.H_G)

    @property
    def d_u(self) -> int:
        return self.G.d_u

    @property
    def d_y(self) -> int:
        return self.G.d_y

    @property
    def n(self) -> int:
        return self.H * self.d_u * self.d_y

    @property
    def set(self) -> ConstraintSet:
        # Frobenius ball of radius R/sqrt(H) sits inside the l1-operator ball of radius R
        return ConstraintSet.ball(np.zeros(self.n), self.R / math.sqrt(self.H))

    def bco_config(self) -> EbcoConfig:
        return EbcoConfig(n=self.n, H=self.H, T=max(self.T, self.H), eta=self.eta,
                          sigma=self.sigma, set=self.set, newton_tol=self.newton_tol,
                          max_iters=self.max_iters, prox_coef=self.prox_coef)


def make_ebpc_config(system: LdsParams, costs: CostSpec, H: int, R: float, T: int,
                     sigma_w: float, sigma_e: float, c_eta: float = 1.0,
                     G: Optional[MarkovOperator] = None, mode: str = "known",
                     sigma: Optional[float] = None, **kw) -> EbpcConfig:
    """Config with the default sigma and eta schedules for the given mode."""
    if G is None:
        G = markov_operator(system, H)
    if sigma is None:
        sigma = _positive_sigma(
            sigma_default_known(system, costs.sigma_c, sigma_e, sigma_w) if mode == "known"
            else sigma_default_unknown(costs.sigma_c, sigma_e))
    eta = eta_default(system.d_u, system.d_y, costs.L_c, H, T, c_eta)
    return EbpcConfig(H=H, R=R, T=T, G=G, eta=eta, sigma=sigma, mode=mode, **kw)


class OutOfOrderError(RuntimeError):
    pass


class Ebpc:
    """Strictly sequenced controller: ``act(y_t)`` then ``feedback(c_t)``."""

    def __init__(self, config: EbpcConfig, rng: Optional[np.random.Generator] = None):
        self.config = config
        self.bco = Ebco(config.bco_config(), rng)
        self.t = 1
        self.awaiting_cost = False
        self.controls = deque(maxlen=max(config.H_G - 1, 1))  # most recent first
        self.ynat_recent = deque(maxlen=config.H)
        self.ynat_log = []
        self.control_log = []
        self.policy = None

    def warm_start(self, observations, controls) -> None:
        """Replay a prefix of (y, u) produced by another controller so that
        nature's-y recovery sees the full control history."""
        for y, u in zip(np.atleast_2d(observations), np.atleast_2d(controls)):
            self._push_ynat(self._recover(y))
            self.controls.appendleft(np.asarray(u, dtype=float))

    def _recover(self, y) -> np.ndarray:
        G = self.config.G.blocks
        out = np.array(y, dtype=float)
        for i, u in enumerate(self.controls, start=1):
            if i >= self.config.H_G:
                break
            out -= G[i] @ u
        return out

    def _push_ynat(self, ynat) -> None:
        self.ynat_recent.appendleft(ynat)

    def act(self, y) -> np.ndarray:
        if self.awaiting_cost:
            raise OutOfOrderError(f"step {self.t}: observation received before cost feedback")
        cfg = self.config
        ynat = self._recover(y)
        self.ynat_log.append(ynat)
        self._push_ynat(ynat)
        self.policy = unflatten(self.bco.play(), cfg.H, cfg.d_u, cfg.d_y)
        if self.t <= cfg.H - 1:
            u = np.zeros(cfg.d_u)
        else:
            recent = np.zeros((cfg.H, cfg.d_y))
            for j, v in enumerate(self.ynat_recent):
                recent[j] = v
            u = drc_control(self.policy, recent)
        self.controls.appendleft(u)
        self.control_log.append(u)
        self.awaiting_cost = True
        return u

    def feedback(self, cost_value: float) -> None:
        if not self.awaiting_cost:
            raise OutOfOrderError(f"step {self.t}: cost feedback without a played control")
        self.bco.feedback(float(cost_value))
        self.awaiting_cost = False
        self.t += 1


def ebpc_step(controller: Ebpc, y_t, cost_fn) -> np.ndarray:
    """One full interaction: play on ``y_t``, then report ``cost_fn(u_t)``."""
    u = controller.act(y_t)
    controller.feedback(cost_fn(u))
    return u


def _observer(system: LdsParams, K):
    if K is None:
        return None
    return np.linalg.inv(system.C)


def run_ebpc(system: LdsParams, trace: NoiseTrace, costs: CostSpec, config: EbpcConfig,
             rng: np.random.Generator, stabilizer=None, x0=None, history=None) -> TrialResult:
    """Closed loop for ``trace.T`` steps.

    ``stabilizer`` K adds K x_hat_t (x_hat = C^{-1} y_t, full observation only) to the
    controller's output; ``config.G`` must then describe the stabilized system.
    ``history=(Y, U)`` pre-loads the controller with an earlier control prefix.
    """
    K = None if stabilizer is None else np.atleast_2d(np.asarray(stabilizer, dtype=float))
    C_inv = _observer(system, K)
    ctrl = Ebpc(config, rng)
    if history is not None:
        ctrl.warm_start(*history)
    if x0 is None:
        x0 = trace.x0
    x = np.zeros(system.d_x) if x0 is None else np.asarray(x0, dtype=float).copy()
    w, e = trace.w, trace.e
    T = trace.T
    cost = np.empty(T)
    unorm = np.empty(T)
    pfro = np.empty(T)
    pl1 = np.empty(T)
    Y = np.empty((T, system.d_y))
    U = np.empty((T, system.d_u))
    for t in range(T):
        y = system.C @ x + e[t]
        v = ctrl.act(y)
        u = v if K is None else v + K @ (C_inv @ y)
        c = cost_eval(costs, t + 1, y, u)
        ctrl.feedback(c)
        cost[t], unorm[t] = c, np.linalg.norm(u)
        pfro[t] = ctrl.policy.fro_norm()
        pl1[t] = l1_op_norm(ctrl.policy)
        Y[t], U[t] = y, u
        x = system.A @ x + system.B @ u + w[t]
    return TrialResult(cost, unorm, pfro, ["ctrl"] * T, Y, U,
                       {"policy_l1_op": pl1, "ynat": np.array(ctrl.ynat_log),
                        "excitation": np.array(ctrl.control_log), "final_state": x,
                        "final_policy": ctrl.policy})


def run_ebpc_unknown(system: LdsParams, trace: NoiseTrace, costs: CostSpec, base_H: int,
                     base_R: float, T: Optional[int] = None, rng=None, c_eta: float = 1.0,
                     eta: Optional[float] = None, sigma: Optional[float] = None,
                     stabilizer=None, sigma_e: Optional[float] = None) -> TrialResult:
    """Estimate with N = ceil(sqrt(T)) Gaussian inputs, then control with G <- G_hat,
    H <- 3H, R <- 2R and the unknown-system sigma.

    ``rng`` is split into (estimation, control) child streams.
    """
    T = trace.T if T is None else T
    if T < 4:
        raise ValueError("T must be >= 4")
    if T > trace.T:
        raise ValueError(f"T={T} exceeds trace length {trace.T}")
    rng = np.random.default_rng() if rng is None else rng
    est_rng, ctrl_rng = rng.spawn(2)
    N = ceil_sqrt(T)
    H, R = 3 * base_H, 2.0 * base_R
    loop_sys = system if stabilizer is None else system.closed_loop(stabilizer)
    report, log = run_estimation_phase(system, trace.slice(0, N), N, H, est_rng, costs,
                                       stabilizer, trace.x0,
                                       G_true=markov_operator(loop_sys, H))
    if sigma_e is None:
        sigma_e = trace.params.sigma_e
    if sigma is None:
        sigma = _positive_sigma(sigma_default_unknown(costs.sigma_c, sigma_e))
    if eta is None:
        eta = eta_default(system.d_u, system.d_y, costs.L_c, H, T, c_eta)
    config = EbpcConfig(H=H, R=R, T=T - N, G=report.G_hat, eta=eta, sigma=sigma, mode="unknown")
    phase2 = run_ebpc(system, trace.slice(N, T), costs, config, ctrl_rng, stabilizer,
                      x0=log["final_state"], history=(log["observations"], log["excitation"]))
    out = TrialResult.concat(estimation_trial(log), phase2)
    out.extras["estimation"] = report
    out.extras["config"] = config
    return out
