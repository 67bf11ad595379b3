"""Least-squares estimation of the Markov operator from Gaussian-excited rollouts."""
import json
import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np
import scipy.linalg

from .lds import CostSpec, LdsParams, MarkovOperator, NoiseTrace, cost_eval
from .results import TrialResult


@dataclass
class EstimationReport:
    G_hat: MarkovOperator
    N: int
    residual: float
    rank: int
    rank_deficient: bool
    err_l1_op: Optional[float] = None

    def to_csv(self) -> str:
        dy, du = self.G_hat.d_y, self.G_hat.d_u
        header = ["i"] + [f"g_{r}_{c}" for r in range(dy) for c in range(du)]
        lines = [",".join(header)]
        for i, block in enumerate(self.G_hat.blocks):
            lines.append(",".join([str(i)] + [repr(float(v)) for v in block.ravel()]))
        return "\n".join(lines) + "\n"

    def summary_json(self) -> str:
        return json.dumps({"N": self.N, "residual": self.residual, "err_l1_op": self.err_l1_op,
                           "rank": self.rank, "rank_deficient": self.rank_deficient},
                          sort_keys=True)


def sysest_ls(observations, controls, H: int) -> EstimationReport:
    """Fit G^[0..H-1] minimising sum_{t=H}^N |y_t - sum_i G^[i] u_{t-i}|^2.

    Solved with a column-pivoted QR (LAPACK gelsy), which returns the
    minimum-norm solution when the regressors are rank deficient.
    """
    Y = np.atleast_2d(np.asarray(observations, dtype=float))
    U = np.atleast_2d(np.asarray(controls, dtype=float))
    if Y.shape[0] != U.shape[0]:
        raise ValueError("observations and controls must have the same length")
    N, dy = Y.shape
    du = U.shape[1]
    if N < H:
        raise ValueError(f"need at least H={H} samples, got {N}")
    if N < H + du * H:
        warnings.warn(f"N={N} < H + d_u*H = {H + du * H}: least squares is underdetermined",
                      RuntimeWarning)
    rows = N - H + 1
    # row for time t (0-based t = H-1..N-1): [u_t, u_{t-1}, ..., u_{t-H+1}]
    Phi = np.hstack([U[H - 1 - i: N - i] for i in range(H)])
    targets = Y[H - 1:]
    ncols = Phi.shape[1]
    if not np.any(Phi):
        sol, rank = np.zeros((ncols, dy)), 0
    else:
        sol, _, rank, _ = scipy.linalg.lstsq(Phi, targets, lapack_driver="gelsy")
    resid = float(np.sum((targets - Phi @ sol) ** 2)) if rows > 0 else 0.0
    # sol[i*du + k, r] is G^[i]_{r,k}
    blocks = sol.reshape(H, du, dy).transpose(0, 2, 1)
    return EstimationReport(MarkovOperator(blocks), N, resid, int(rank), int(rank) < ncols)


def estimation_error(G_hat: MarkovOperator, G_true: MarkovOperator) -> float:
    """sum_i ||G_hat^[i] - G^[i]||_op, padding the shorter operator with zeros."""
    H = max(G_hat.H_G, G_true.H_G)
    diff = G_hat.truncated(H).blocks - G_true.truncated(H).blocks
    return float(np.linalg.norm(diff, ord=2, axis=(1, 2)).sum())


def run_estimation_phase(system: LdsParams, trace: NoiseTrace, N: int, H: int,
                         rng: np.random.Generator, costs: Optional[CostSpec] = None,
                         stabilizer=None, x0=None, G_true: Optional[MarkovOperator] = None):
    """Drive the system with u_t ~ N(0, I) for N steps and fit the Markov operator.

    With a stabilizing ``stabilizer`` K (full observation), the applied input is
    u_t + K x_hat_t and the fitted operator is that of the stabilized system.
    Returns ``(report, log)`` where ``log`` carries the observations, excitation
    inputs, applied inputs, costs and final state.
    """
    if N > trace.T:
        raise ValueError(f"N={N} exceeds trace length {trace.T}")
    K = None if stabilizer is None else np.atleast_2d(np.asarray(stabilizer, dtype=float))
    x = np.zeros(system.d_x) if x0 is None else np.asarray(x0, dtype=float).copy()
    w, e = trace.w, trace.e
    Y = np.empty((N, system.d_y))
    V = rng.standard_normal((N, system.d_u))
    U = np.empty((N, system.d_u))
    cost = np.zeros(N)
    for t in range(N):
        y = system.C @ x + e[t]
        u = V[t] if K is None else V[t] + K @ np.linalg.solve(system.C, y)
        Y[t], U[t] = y, u
        if costs is not None:
            cost[t] = cost_eval(costs, t + 1, y, u)
        x = system.A @ x + system.B @ u + w[t]
    report = sysest_ls(Y, V, H)
    if G_true is not None:
        report.err_l1_op = estimation_error(report.G_hat, G_true)
    log = {"observations": Y, "excitation": V, "controls": U, "cost": cost, "final_state": x}
    return report, log


def estimation_trial(log) -> TrialResult:
    U = log["controls"]
    N = U.shape[0]
    return TrialResult(log["cost"].copy(), np.linalg.norm(U, axis=1), np.full(N, np.nan),
                       ["est"] * N, log["observations"].copy(), U.copy())
