"""Comparison controllers and the hindsight-optimal DRC oracle."""
import math
from collections import deque
from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from . import _kernels
from .geometry import sample_unit_sphere
from .lds import CostSpec, LdsParams, MarkovOperator, NoiseTrace, cost_eval
from .policy import DrcParams, l1_op_norm, unflatten
from .results import TrialResult


class DareError(RuntimeError):
    pass


@dataclass(frozen=True)
class LqrGain:
    K: np.ndarray
    P: np.ndarray
    iterations: int = 0


def dare_residual(A, B, Q, R, P) -> float:
    BtP = B.T @ P
    rhs = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
    return float(np.max(np.abs(rhs - P)))


def dare_solve(A, B, Q, R, tol: float = 1e-10, max_iters: int = 100_000) -> LqrGain:
    """Riccati value iteration P <- Q + A'PA - A'PB (R + B'PB)^{-1} B'PA, started at P = Q.

    Convergence is declared when max|dP| <= tol, or when dP is at the rounding
    floor of P (a few ulps of max|P|) and cannot shrink further.
    """
    A, B, Q, R = (np.atleast_2d(np.asarray(m, dtype=float)) for m in (A, B, Q, R))
    P = Q.copy()
    for it in range(1, max_iters + 1):
        BtP = B.T @ P
        with np.errstate(over="ignore", invalid="ignore"):
            P_new = Q + A.T @ P @ A - A.T @ P @ B @ np.linalg.solve(R + BtP @ B, BtP @ A)
            P_new = 0.5 * (P_new + P_new.T)
        if not np.all(np.isfinite(P_new)) or np.max(np.abs(P_new)) > 1e150:
            raise DareError("DARE diverged")
        delta = np.max(np.abs(P_new - P))
        P = P_new
        if delta <= tol or delta <= 64.0 * np.finfo(float).eps * np.max(np.abs(P)):
            break
    else:
        raise DareError(f"DARE diverged: no convergence in {max_iters} iterations")
    K = -np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)
    return LqrGain(K, P, it)


def lqr_control(gain: LqrGain, x) -> np.ndarray:
    return gain.K @ np.atleast_1d(np.asarray(x, dtype=float))


def _simulate(system, trace, costs, policy_fn, x0=None):
    """Generic closed loop; ``policy_fn(t, y, x_hat)`` returns the applied input."""
    x = trace.x0 if x0 is None else x0
    x = np.zeros(system.d_x) if x is None else np.asarray(x, dtype=float).copy()
    C_inv = np.linalg.inv(system.C) if system.C.shape[0] == system.C.shape[1] else None
    w, e = trace.w, trace.e
    T = trace.T
    cost = np.empty(T)
    Y = np.empty((T, system.d_y))
    U = np.empty((T, system.d_u))
    for t in range(T):
        y = system.C @ x + e[t]
        x_hat = None if C_inv is None else C_inv @ y
        u = policy_fn(t, y, x_hat)
        cost[t] = cost_eval(costs, t + 1, y, u)
        Y[t], U[t] = y, u
        x = system.A @ x + system.B @ u + w[t]
    return cost, Y, U


def run_lqr(system: LdsParams, trace: NoiseTrace, costs: CostSpec, gain: Optional[LqrGain] = None):
    """u_t = K x_hat_t with x_hat = C^{-1} y_t (full observation)."""
    if gain is None:
        gain = dare_solve(system.A, system.B, costs.Q, costs.R)
    cost, Y, U = _simulate(system, trace, costs, lambda t, y, xh: gain.K @ xh)
    return TrialResult(cost, np.linalg.norm(U, axis=1), np.full(trace.T, np.nan),
                       ["ctrl"] * trace.T, Y, U, {"K": gain.K})


def run_zero(system: LdsParams, trace: NoiseTrace, costs: CostSpec):
    zero = np.zeros(system.d_u)
    cost, Y, U = _simulate(system, trace, costs, lambda t, y, xh: zero)
    return TrialResult(cost, np.zeros(trace.T), np.full(trace.T, np.nan), ["ctrl"] * trace.T, Y, U)


# ---------------------------------------------------------------------------
# BPC: spherical one-point estimates over disturbance-action policies
# ---------------------------------------------------------------------------

@dataclass
class BpcConfig:
    H: int
    delta: float
    lr: float
    R_bound: float
    T: int = 0

    def __post_init__(self):
        if self.delta <= 0 or self.lr <= 0:
            raise ValueError("delta and lr must be > 0")


def clip_fro(v, bound):
    nrm = np.linalg.norm(v)
    return v * (bound / nrm) if nrm > bound else v


def run_bpc(system: LdsParams, trace: NoiseTrace, costs: CostSpec, config: BpcConfig,
            rng: np.random.Generator, stabilizer=None) -> TrialResult:
    """Full-observation bandit perturbation controller with magnitude bounding.

    Plays v_t = sum_{i=1}^H M~_t^[i-1] w_{t-i} with M~_t = M_t + delta * eps_t and
    w recovered from consecutive states; the update is
    M_{t+1} = clip_fro(M_t - lr * (n / delta) * c_t * sum_{i<H} eps_{t-i}).
    """
    if system.C.shape[0] != system.C.shape[1]:
        raise ValueError("BPC needs full observation (square, invertible C)")
    K = None if stabilizer is None else np.atleast_2d(np.asarray(stabilizer, dtype=float))
    A_loop = system.A if K is None else system.A + system.B @ K
    C_inv = np.linalg.inv(system.C)
    H, du, dx = config.H, system.d_u, system.d_x
    n = H * du * dx
    m = np.zeros(n)
    eps_hist = deque(maxlen=H)
    w_hist = deque(maxlen=H)  # w_{t-1}, w_{t-2}, ... most recent first
    x = trace.x0
    x = np.zeros(dx) if x is None else np.asarray(x, dtype=float).copy()
    w, e = trace.w, trace.e
    T = trace.T
    cost = np.empty(T)
    unorm = np.empty(T)
    pfro = np.empty(T)
    Y = np.empty((T, system.d_y))
    U = np.empty((T, du))
    prev = None
    for t in range(T):
        y = system.C @ x + e[t]
        x_hat = C_inv @ y
        if prev is not None:
            x_prev, v_prev = prev
            w_hist.appendleft(x_hat - A_loop @ x_prev - system.B @ v_prev)
        eps = sample_unit_sphere(n, rng)
        eps_hist.append(eps)
        M = (m + config.delta * eps).reshape(H, du, dx)
        v = np.zeros(du)
        for i, wi in enumerate(w_hist):
            v += M[i] @ wi
        u = v if K is None else v + K @ x_hat
        c = cost_eval(costs, t + 1, y, u)
        g = (n / config.delta) * c * np.sum(eps_hist, axis=0)
        m = clip_fro(m - config.lr * g, config.R_bound)
        cost[t], unorm[t], pfro[t] = c, np.linalg.norm(u), np.linalg.norm(m)
        Y[t], U[t] = y, u
        prev = (x_hat, v)
        x = system.A @ x + system.B @ u + w[t]
    return TrialResult(cost, unorm, pfro, ["ctrl"] * T, Y, U)


# ---------------------------------------------------------------------------
# Hindsight-optimal DRC
# ---------------------------------------------------------------------------

@dataclass
class HindsightResult:
    M: DrcParams
    total_cost: float
    converged: bool
    pg_norm: float
    iterations: int
    extras: dict = field(default_factory=dict)


def drc_quadratic(G: MarkovOperator, ynat, costs: CostSpec, H: int, K_obs=None):
    """Exact quadratic J(m) = m'Pm + 2q'm + r of the counterfactual DRC cost.

    y_t^M = ynat_t + L_t m, v_t^M = V_t m, applied input u_t = v_t + K_obs y_t.
    """
    ynat = np.ascontiguousarray(ynat, dtype=float)
    du = G.d_u
    V, L = _kernels.drc_design(np.ascontiguousarray(G.blocks), ynat, int(H), int(du))
    T = ynat.shape[0]
    if K_obs is not None:
        K_obs = np.atleast_2d(np.asarray(K_obs, dtype=float))
        U_lin = V + np.einsum("ak,tkc->tac", K_obs, L)
        U_off = ynat @ K_obs.T
    else:
        U_lin, U_off = V, np.zeros((T, du))
    if costs.time_invariant:
        Q, R = costs.Q, costs.R
        P = np.einsum("tic,ij,tjd->cd", L, Q, L) + np.einsum("tic,ij,tjd->cd", U_lin, R, U_lin)
        q = np.einsum("ti,ij,tjc->c", ynat, Q, L) + np.einsum("ti,ij,tjc->c", U_off, R, U_lin)
        r = float(np.einsum("ti,ij,tj->", ynat, Q, ynat) + np.einsum("ti,ij,tj->", U_off, R, U_off))
    else:
        n = L.shape[2]
        P, q, r = np.zeros((n, n)), np.zeros(n), 0.0
        for t in range(T):
            Q, R = costs.matrices(t + 1)
            P += L[t].T @ Q @ L[t] + U_lin[t].T @ R @ U_lin[t]
            q += ynat[t] @ Q @ L[t] + U_off[t] @ R @ U_lin[t]
            r += float(ynat[t] @ Q @ ynat[t] + U_off[t] @ R @ U_off[t])
    return 0.5 * (P + P.T), q, r


def _trust_region(P, q, radius):
    """Exact minimiser of m'Pm + 2q'm over |m| <= radius (eigen-decomposition + secular root)."""
    lam, V = np.linalg.eigh(P)
    b = V.T @ q
    lam_min = lam[0]

    def norm_at(mu):
        return np.sqrt(np.sum((b / (lam + mu)) ** 2))

    if lam_min > 0:
        m = -V @ (b / lam)
        if np.linalg.norm(m) <= radius:
            return m
    lo = max(0.0, -lam_min) + 1e-300
    hi = max(lo * 2, 1.0)
    while norm_at(hi) > radius:
        hi *= 2.0
    if norm_at(lo) <= radius:
        return -V @ (b / (lam + lo))
    for _ in range(200):
        mid = 0.5 * (lo + hi)
        if norm_at(mid) > radius:
            lo = mid
        else:
            hi = mid
    m = -V @ (b / (lam + hi))
    nrm = np.linalg.norm(m)
    return m * (radius / nrm) if nrm > radius else m


def best_drc_hindsight(G: MarkovOperator, ynat, costs: CostSpec, H: int, R: float,
                       K_obs=None, tol: float = 1e-7, max_iters: int = 200_000) -> HindsightResult:
    """Best fixed DRC over the Frobenius ball |M|_F <= R/sqrt(H).

    The counterfactual cost is an exact quadratic in M. A trust-region solve gives
    a starting point; accelerated projected gradient then drives the projected
    gradient norm below ``tol``.
    """
    P, q, r = drc_quadratic(G, ynat, costs, H, K_obs)
    d_u, d_y = G.d_u, G.d_y
    radius = R / math.sqrt(H)
    m0 = _trust_region(P, q, radius)
    Lip = 2.0 * max(float(np.linalg.eigvalsh(P)[-1]), 1e-300)
    m, pg, it = _kernels.ball_qp_pgd(np.ascontiguousarray(P), np.ascontiguousarray(q),
                                     float(radius), np.ascontiguousarray(m0), 1.0 / Lip,
                                     float(tol), int(max_iters))
    m = np.asarray(m)
    J = float(m @ P @ m + 2 * q @ m + r)
    return HindsightResult(unflatten(m, H, d_u, d_y), J, bool(pg <= tol), float(pg), int(it),
                           {"P": P, "q": q, "r": r})


def drc_cost(P, q, r, m) -> float:
    m = np.asarray(m, dtype=float)
    return float(m @ P @ m + 2 * q @ m + r)


def best_drc_hindsight_l1op(G: MarkovOperator, ynat, costs: CostSpec, H: int, R: float,
                            K_obs=None, iters: int = 2000) -> HindsightResult:
    """Frank-Wolfe over the full l1-operator ball sum_j ||M^[j]||_op <= R.

    The linear minimisation oracle puts the whole budget on the block whose gradient
    has the largest nuclear norm, at -R times that block's polar factor.
    """
    P, q, r = drc_quadratic(G, ynat, costs, H, K_obs)
    d_u, d_y = G.d_u, G.d_y
    m = _trust_region(P, q, R / math.sqrt(H))  # feasible: inside the Frobenius ball
    gap = np.inf
    for it in range(iters):
        grad = 2.0 * (P @ m + q)
        Gb = grad.reshape(H, d_u, d_y)
        nucs = []
        polars = []
        for j in range(H):
            Uj, s, Vt = np.linalg.svd(Gb[j], full_matrices=False)
            nucs.append(s.sum())
            polars.append(Uj @ Vt)
        j = int(np.argmax(nucs))
        S = np.zeros((H, d_u, d_y))
        S[j] = -R * polars[j]
        d = S.ravel() - m
        gap = float(-grad @ d)
        if gap <= 1e-9 * max(1.0, abs(drc_cost(P, q, r, m))):
            break
        curv = float(d @ P @ d)
        step = 1.0 if curv <= 0 else min(1.0, gap / (2.0 * curv))
        m = m + step * d
    J = drc_cost(P, q, r, m)
    M = unflatten(m, H, d_u, d_y)
    return HindsightResult(M, J, gap <= 1e-6 * max(1.0, abs(J)), gap, it + 1,
                           {"l1_op": l1_op_norm(M)})
