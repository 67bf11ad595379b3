"""Bandit convex optimization with memory via ellipsoidal gradient estimates.

The optimizer keeps barrier-regularized follow-the-leader centers x_t, plays
y_t = x_t + A_t u_t with A_t = (hess R(x_t) + eta sigma t I)^{-1/2} and u_t
uniform on the sphere, and feeds the one-point estimate
g_t = n F_t * sum_{i<H} A_{t-i}^{-1} u_{t-i} into a delayed update that only
uses g_{t-H+1} at time t.
"""
import copy
from collections import deque
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import _kernels
from .geometry import (ConstraintSet, InvSqrt, analytic_center, barrier_eval,
                       barrier_precond, sample_unit_sphere)


class NewtonError(RuntimeError):
    pass


@dataclass
class EbcoConfig:
    n: int
    H: int
    T: int
    eta: float
    sigma: float
    set: ConstraintSet
    newton_tol: float = 1e-9
    max_iters: int = 100
    # coefficient of sigma*|x - anchor|^2 in the update (1/2 in the base algorithm)
    prox_coef: float = 0.5
    # B, L, beta: reported, never enforced
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        problems = []
        if self.eta <= 0:
            problems.append("eta must be > 0")
        if self.sigma <= 0:
            problems.append("sigma must be > 0")
        if self.H < 1:
            problems.append("H must be >= 1")
        if self.T < self.H:
            problems.append("T must be >= H")
        if self.set.n != self.n:
            problems.append(f"constraint set has dimension {self.set.n}, expected n={self.n}")
        if problems:
            raise ValueError("; ".join(problems))


# ---------------------------------------------------------------------------
# Inner solver: argmin_x eta * (x'Px/2 + q'x) + R(x)
# ---------------------------------------------------------------------------

@dataclass
class NewtonResult:
    x: np.ndarray
    grad_norm: float
    iterations: int


def solve_barrier_quadratic(cset: ConstraintSet, P, q, eta, x0, tol=1e-9, max_iters=100):
    """argmin of eta * (x'Px/2 + q'x) + R(x).

    A scalar ``P`` (meaning P * I) reduces to one-dimensional roots, solved
    exactly by the kernels: one radial root on a ball, one root per coordinate
    on a box. Otherwise Newton with backtracking runs from the interior warm
    start ``x0``.
    """
    x0 = np.ascontiguousarray(x0, dtype=float)
    q = np.ascontiguousarray(q, dtype=float)
    if np.isscalar(P) and cset.kind == "ball":
        x, gn, it, status = _kernels.ball_argmin(q, float(P), float(eta), cset.center,
                                                  cset.radius, _kernels.ROOT_MAX_ITERS)
        if status == 2:
            raise NewtonError(f"radial root search did not converge (gradient norm {gn:.3e})")
        return NewtonResult(np.asarray(x), float(gn), int(it))
    if np.isscalar(P) and cset.kind == "box":
        x, gn, it, status = _kernels.box_argmin(q, float(P), float(eta), cset.lower, cset.upper,
                                                 _kernels.ROOT_MAX_ITERS)
        if status == 2:
            raise NewtonError(f"coordinate root search did not converge (gradient norm {gn:.3e})")
        return NewtonResult(np.asarray(x), float(gn), int(it))
    P = P * np.eye(x0.shape[0]) if np.isscalar(P) else np.asarray(P, dtype=float)

    def objective(z):
        if not cset.is_interior(z):
            return np.inf
        return eta * (0.5 * z @ P @ z + q @ z) + barrier_eval(cset, z).value

    x = x0.copy()
    gn = np.inf
    for it in range(max_iters + 1):
        be = barrier_eval(cset, x)
        g = eta * (P @ x + q) + be.grad
        gn = float(np.linalg.norm(g))
        if gn <= tol:
            return NewtonResult(x, gn, it)
        if it == max_iters:
            break
        d = np.linalg.solve(eta * P + be.hess, g)
        lam2 = max(float(g @ d), 0.0)
        if np.sqrt(lam2) < _kernels.STALL_DECREMENT:
            return NewtonResult(x, gn, it)
        if lam2 < _kernels.FULL_STEP_DECREMENT ** 2:
            x = x - d
            continue
        f0 = eta * (0.5 * x @ P @ x + q @ x) + be.value
        step = 1.0
        while step >= _kernels.MIN_STEP:
            if objective(x - step * d) <= f0 - _kernels.ARMIJO * step * lam2:
                break
            step *= 0.5
        else:
            return NewtonResult(x, gn, it)
        x = x - step * d
    raise NewtonError(f"Newton did not converge in {max_iters} iterations (gradient norm {gn:.3e})")


def rftl_objective(x, lin, mass, eta, cset, const=0.0):
    """eta * (lin'x + mass/2 |x|^2 + const) + R(x)."""
    x = np.asarray(x, dtype=float)
    return float(eta * (lin @ x + 0.5 * mass * (x @ x) + const) + barrier_eval(cset, x).value)


def fold_terms(g_terms, anchors, sigma, prox_coef=0.5):
    """Collapse sum_k (g_k'x + c sigma |x - a_k|^2) into (lin, mass, const) of
    lin'x + mass/2 |x|^2 + const."""
    g_terms = np.atleast_2d(np.asarray(g_terms, dtype=float))
    anchors = np.atleast_2d(np.asarray(anchors, dtype=float))
    w = 2.0 * prox_coef * sigma
    lin = g_terms.sum(axis=0) - w * anchors.sum(axis=0)
    mass = w * anchors.shape[0]
    const = 0.5 * w * float(np.sum(anchors * anchors))
    return lin, mass, const


def rftl_d_update(g_log, x_anchor_log, config: EbcoConfig, warm_start) -> np.ndarray:
    """x_{t+1} = argmin sum_s (g_s'x + sigma/2 |x - x_s|^2) + R(x)/eta over the supplied pairs."""
    if len(g_log) == 0:
        raise ValueError("need at least one (gradient, anchor) pair")
    lin, mass, _ = fold_terms(g_log, x_anchor_log, config.sigma, config.prox_coef)
    res = solve_barrier_quadratic(config.set, mass, lin, config.eta, warm_start,
                                  config.newton_tol, config.max_iters)
    return res.x


def grad_estimate(loss_value: float, A_inv_hist: Sequence[np.ndarray],
                  u_hist: Sequence[np.ndarray], n: int, H: int) -> np.ndarray:
    """n * loss * sum_{i<H} A_{t-i}^{-1} u_{t-i} over the H most recent (A^{-1}, u) pairs."""
    if len(A_inv_hist) != H or len(u_hist) != H:
        raise ValueError(f"need exactly H={H} preconditioners and noises")
    acc = np.zeros(n)
    for A_inv, u in zip(A_inv_hist, u_hist):
        acc += A_inv @ u
    return n * float(loss_value) * acc


# ---------------------------------------------------------------------------
# Optimizer state machine
# ---------------------------------------------------------------------------

@dataclass
class EbcoState:
    t: int
    x_hist: deque           # (time, x) for the last H+1 centers
    A_hist: deque           # (time, InvSqrt) for the last H preconditioners
    u_hist: deque           # (time, u) for the last H sphere noises
    g_log: list
    x_anchor_log: list
    lin: np.ndarray
    mass: float
    const: float
    rng: np.random.Generator
    played: bool = False
    newton_iters: int = 0
    trace_rows: Optional[list] = None

    def snapshot(self) -> "EbcoState":
        return copy.deepcopy(self)

    def center(self, s: Optional[int] = None) -> np.ndarray:
        s = self.t if s is None else s
        for k, x in self.x_hist:
            if k == s:
                return x
        raise KeyError(f"center x_{s} is no longer stored")

    def precond(self, s: Optional[int] = None) -> InvSqrt:
        s = self.t if s is None else s
        for k, A in self.A_hist:
            if k == s:
                return A
        raise KeyError(f"preconditioner A_{s} is no longer stored")

    def noise(self, s: Optional[int] = None) -> np.ndarray:
        s = self.t if s is None else s
        for k, u in self.u_hist:
            if k == s:
                return u
        raise KeyError(f"noise u_{s} is no longer stored")

    def set_noise(self, s: int, u) -> None:
        """Test hook: replace the stored sphere noise u_s."""
        for i, (k, _) in enumerate(self.u_hist):
            if k == s:
                self.u_hist[i] = (k, np.asarray(u, dtype=float))
                return
        raise KeyError(f"noise u_{s} is no longer stored")

    def played_point(self, s: Optional[int] = None) -> np.ndarray:
        s = self.t if s is None else s
        return self.center(s) + self.precond(s).A @ self.noise(s)


def _precondition(cset, x, eta, sigma, t) -> InvSqrt:
    return barrier_precond(cset, x, eta * sigma * t)


def ebco_init(config: EbcoConfig, rng: Optional[np.random.Generator] = None,
              trace: bool = False) -> EbcoState:
    rng = np.random.default_rng() if rng is None else rng
    H, n = config.H, config.n
    x0 = analytic_center(config.set)
    x_hist = deque(maxlen=H + 1)
    A_hist = deque(maxlen=H)
    u_hist = deque(maxlen=H)
    for i in range(1, H + 1):
        x_hist.append((i, x0.copy()))
        A_hist.append((i, _precondition(config.set, x0, config.eta, config.sigma, i)))
    for i in range(1, H + 1):
        u_hist.append((i, sample_unit_sphere(n, rng)))
    return EbcoState(
        t=1, x_hist=x_hist, A_hist=A_hist, u_hist=u_hist,
        g_log=[np.zeros(n) for _ in range(H - 1)],
        x_anchor_log=[x0.copy() for _ in range(H - 1)],
        lin=np.zeros(n), mass=0.0, const=0.0, rng=rng,
        trace_rows=[] if trace else None,
    )


def ebco_play(state: EbcoState) -> np.ndarray:
    state.played = True
    return state.played_point()


def ebco_feedback(state: EbcoState, loss_value: float, config: EbcoConfig) -> None:
    if not state.played:
        raise RuntimeError(f"feedback for step {state.t} before the point was played")
    t, H = state.t, config.H
    state.played = False
    if t < H:
        # burn-in: x_{t+1}, A_{t+1}, u_{t+1} were fixed at initialization
        state.t += 1
        return
    x_t = state.center(t)
    A_inv = [A.A_inv for k, A in state.A_hist if k > t - H]
    us = [u for k, u in state.u_hist if k > t - H]
    g_t = grad_estimate(loss_value, A_inv, us, config.n, H)
    state.g_log.append(g_t)
    state.x_anchor_log.append(x_t.copy())

    k = t - (H - 1)
    g_k, a_k = state.g_log[k - 1], state.x_anchor_log[k - 1]
    w = 2.0 * config.prox_coef * config.sigma
    state.lin = state.lin + g_k - w * a_k
    state.mass += w
    state.const += 0.5 * w * float(a_k @ a_k)
    res = solve_barrier_quadratic(config.set, state.mass, state.lin, config.eta, x_t,
                                  config.newton_tol, config.max_iters)
    x_next = res.x
    state.newton_iters = res.iterations
    state.x_hist.append((t + 1, x_next))
    state.A_hist.append((t + 1, _precondition(config.set, x_next, config.eta, config.sigma, t + 1)))
    state.u_hist.append((t + 1, sample_unit_sphere(config.n, state.rng)))
    if state.trace_rows is not None:
        state.trace_rows.append((t, float(loss_value), float(np.linalg.norm(g_t)),
                                 float(np.linalg.norm(x_next - x_t)), res.iterations))
    state.t += 1


def trace_csv(state: EbcoState) -> str:
    lines = ["t,loss,grad_norm,step_norm,newton_iters"]
    for t, loss, gn, sn, it in state.trace_rows or []:
        lines.append(f"{t},{loss!r},{gn!r},{sn!r},{it}")
    return "\n".join(lines) + "\n"


class Ebco:
    """Object wrapper around the play/feedback state machine."""

    def __init__(self, config: EbcoConfig, rng=None, trace=False):
        self.config = config
        self.state = ebco_init(config, rng, trace)

    @property
    def t(self) -> int:
        return self.state.t

    def play(self) -> np.ndarray:
        return ebco_play(self.state)

    def feedback(self, loss_value: float) -> None:
        ebco_feedback(self.state, loss_value, self.config)


# ---------------------------------------------------------------------------
# Full-information RFTL with delay
# ---------------------------------------------------------------------------

@dataclass
class QuadraticLoss:
    """l(x) = x'Px/2 + q'x + c (P = 0 gives a linear loss)."""

    P: np.ndarray
    q: np.ndarray
    c: float = 0.0

    def __post_init__(self):
        self.q = np.atleast_1d(np.asarray(self.q, dtype=float))
        n = self.q.shape[0]
        if self.P is None:
            self.P = np.zeros((n, n))
        elif np.isscalar(self.P):
            self.P = float(self.P) * np.eye(n)
        else:
            self.P = np.asarray(self.P, dtype=float)

    def value(self, x):
        return float(0.5 * x @ self.P @ x + self.q @ x + self.c)

    def grad(self, x):
        return self.P @ x + self.q

    def hess(self, x):
        return self.P


def rftl_d_full_info(losses, cset: ConstraintSet, eta: float, H: int, sigma: Optional[float] = None,
                     surrogate: bool = False, tol: float = 1e-9, max_iters: int = 100):
    """Delayed regularized follow-the-leader with full information.

    ``losses[k]`` is the loss revealed at time H + k (times 1..H-1 carry zero loss).
    Losses must expose ``grad`` and ``hess``; the inner objective is folded into a
    single quadratic, so ``hess`` is assumed constant (quadratic or linear losses).
    Returns the plays x_1..x_{T+1} with T = H - 1 + len(losses). With
    ``surrogate=True`` each loss enters as the linearization at its play plus
    ``sigma/2 |x - x_play|^2``.
    """
    if surrogate and sigma is None:
        raise ValueError("surrogate variant needs sigma")
    n = cset.n
    x0 = analytic_center(cset)
    plays = [x0.copy() for _ in range(H)]
    revealed = [None] * (H - 1)  # l_1..l_{H-1} = 0
    P_acc = np.zeros((n, n))
    q_acc = np.zeros(n)
    for k, loss in enumerate(losses):
        t = H + k
        x_t = plays[t - 1]
        if surrogate:
            g = loss.grad(x_t)
            revealed.append(QuadraticLoss(sigma * np.eye(n), g - sigma * x_t))
        else:
            revealed.append(loss)
        due = revealed[t - H]  # l_{t-H+1}
        if due is not None:
            P_acc = P_acc + due.hess(x_t)
            q_acc = q_acc + due.grad(np.zeros(n))
        if not np.any(P_acc) and not np.any(q_acc):
            plays.append(x0.copy())
            continue
        res = solve_barrier_quadratic(cset, P_acc, q_acc, eta, x_t, tol, max_iters)
        plays.append(res.x)
    return np.array(plays)
