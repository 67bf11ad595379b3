"""Hot numeric loops, compiled with numba when available.

Every kernel has two implementations: a loop-based one compiled with
``numba.njit`` and a pure-numpy one. The compiled path is used unless the
environment variable ``BANDIT_CONTROL_DISABLE_JIT`` is set to a truthy value
or numba cannot be imported. Both paths are exported (``*_jit`` / ``*_np``)
so the test-suite and the benchmark can compare them directly.
"""
import os

import numpy as np

try:
    import numba

    _HAVE_NUMBA = True
except ImportError:  # pragma: no cover - numba is a declared dependency
    _HAVE_NUMBA = False


def _flag(name):
    return os.environ.get(name, "").strip().lower() in ("1", "true", "yes", "on")


USE_JIT = _HAVE_NUMBA and not _flag("BANDIT_CONTROL_DISABLE_JIT")


def _njit(fn):
    if not _HAVE_NUMBA:
        return fn
    return numba.njit(cache=True, nogil=True)(fn)


# ---------------------------------------------------------------------------
# Linear system rollout: x_{t+1} = A x_t + B u_t + w_t, y_t = C x_t + e_t
# ---------------------------------------------------------------------------

def _lds_rollout_loop(A, B, C, x0, U, W, E):
    T = W.shape[0]
    dx = A.shape[0]
    dy = C.shape[0]
    du = B.shape[1]
    X = np.empty((T + 1, dx))
    Y = np.empty((T, dy))
    for i in range(dx):
        X[0, i] = x0[i]
    for t in range(T):
        for r in range(dy):
            acc = E[t, r]
            for k in range(dx):
                acc += C[r, k] * X[t, k]
            Y[t, r] = acc
        for r in range(dx):
            acc = W[t, r]
            for k in range(dx):
                acc += A[r, k] * X[t, k]
            for k in range(du):
                acc += B[r, k] * U[t, k]
            X[t + 1, r] = acc
    return X, Y


lds_rollout_jit = _njit(_lds_rollout_loop)


def lds_rollout_np(A, B, C, x0, U, W, E):
    T = W.shape[0]
    X = np.empty((T + 1, A.shape[0]))
    X[0] = x0
    drive = U @ B.T + W
    for t in range(T):
        X[t + 1] = A @ X[t] + drive[t]
    Y = X[:-1] @ C.T + E
    return X, Y


# ---------------------------------------------------------------------------
# Markov convolution: out_t = sum_{i=1}^{H_G-1} G[i] u_{t-i}
# ---------------------------------------------------------------------------

def _markov_convolve_loop(G, U):
    HG, dy, du = G.shape
    T = U.shape[0]
    out = np.zeros((T, dy))
    for t in range(T):
        top = min(HG - 1, t)
        for i in range(1, top + 1):
            for r in range(dy):
                acc = 0.0
                for k in range(du):
                    acc += G[i, r, k] * U[t - i, k]
                out[t, r] += acc
    return out


markov_convolve_jit = _njit(_markov_convolve_loop)


def markov_convolve_np(G, U):
    HG, dy, _ = G.shape
    T = U.shape[0]
    out = np.zeros((T, dy))
    for i in range(1, min(HG, T)):
        out[i:] += U[: T - i] @ G[i].T
    return out


# ---------------------------------------------------------------------------
# Counterfactual design for DRC policies.
#   V[t] (d_u x n):  u_t^M = V[t] m, m = flatten(M)
#   L[t] (d_y x n):  y_t^M = ynat_t + L[t] m
# with flat index j*d_u*d_y + a*d_y + b for M^[j]_{a,b}.
# ---------------------------------------------------------------------------

def _drc_design_loop(G, ynat, H, du):
    T, dy = ynat.shape
    HG = G.shape[0]
    n = H * du * dy
    V = np.zeros((T, du, n))
    L = np.zeros((T, dy, n))
    for t in range(T):
        for j in range(H):
            if t - j < 0:
                break
            for a in range(du):
                base = j * du * dy + a * dy
                for b in range(dy):
                    V[t, a, base + b] = ynat[t - j, b]
        top = min(HG - 1, t)
        for i in range(1, top + 1):
            for r in range(dy):
                for k in range(du):
                    g = G[i, r, k]
                    if g == 0.0:
                        continue
                    for c in range(n):
                        L[t, r, c] += g * V[t - i, k, c]
    return V, L


drc_design_jit = _njit(_drc_design_loop)


def drc_design_np(G, ynat, H, du):
    T, dy = ynat.shape
    HG = G.shape[0]
    n = H * du * dy
    V = np.zeros((T, du, H, du, dy))
    eye = np.eye(du)
    for j in range(min(H, T)):
        # V[t, a, j, a', b] = delta(a, a') * ynat[t-j, b]
        V[j:, :, j, :, :] = eye[None, :, :, None] * ynat[: T - j, None, None, :]
    V = V.reshape(T, du, n)
    L = np.zeros((T, dy, n))
    for i in range(1, min(HG, T)):
        L[i:] += np.einsum("rk,tkc->trc", G[i], V[: T - i])
    return V, L


# ---------------------------------------------------------------------------
# Trailing moving average over min(window, t) entries.
# ---------------------------------------------------------------------------

def _moving_average_loop(x, window):
    # direct window sums: a running sum drifts (window 1 would not be the identity)
    T = x.shape[0]
    out = np.empty(T)
    for t in range(T):
        lo = max(0, t - window + 1)
        acc = 0.0
        for k in range(lo, t + 1):
            acc += x[k]
        out[t] = acc / (t + 1 - lo)
    return out


moving_average_jit = _njit(_moving_average_loop)


def moving_average_np(x, window):
    padded = np.concatenate((np.zeros(window - 1), x))
    sums = np.lib.stride_tricks.sliding_window_view(padded, window).sum(axis=1)
    return sums / np.minimum(np.arange(1, x.shape[0] + 1), window)


# ---------------------------------------------------------------------------
# Exact argmin of  eta*(lin.x + mass/2 |x|^2) - log(r^2 - |x - c|^2)  over the ball.
# Stationarity gives z = x - c parallel to b = -eta*(lin + mass*c) with
# |z| = rho solving  phi(rho) = rho * (eta*mass + 2/(r^2 - rho^2)) - |b| = 0,
# which is increasing and convex on [0, r). The root is found by Newton's
# method inside a shrinking bracket, falling back to bisection.
# Returns (x, grad_norm, iterations, status): status 0 = converged,
# 1 = slack clamped at SLACK_FLOOR * r^2, 2 = cap. The clamp only binds when the
# exact minimiser is closer to the boundary than double precision can resolve.
#
# The objective gradient is reported for diagnostics only: near the boundary
# the barrier term 2z/s is large and its rounding can exceed a 1e-9 absolute
# tolerance even at the exactly rounded minimiser.
# ---------------------------------------------------------------------------
STALL_DECREMENT = 1e-10
FULL_STEP_DECREMENT = 0.25
ARMIJO = 0.25
MIN_STEP = 1e-20
ROOT_MAX_ITERS = 200
SLACK_FLOOR = 1e-12


def _ball_argmin_loop(lin, mass, eta, center, radius, max_iters):
    n = lin.shape[0]
    b = np.empty(n)
    beta2 = 0.0
    for i in range(n):
        b[i] = -eta * (lin[i] + mass * center[i])
        beta2 += b[i] * b[i]
    beta = np.sqrt(beta2)
    x = center.copy()
    r = radius
    k = eta * mass
    it = 0
    status = 0
    if beta > 0.0:
        lo = 0.0
        # phi(rho) >= rho*(k + 2/r^2) - beta, so the root is at most beta/(k + 2/r^2)
        hi = min(r, beta / (k + 2.0 / (r * r)))
        rho = hi if hi < r else 0.5 * r
        status = 2
        for it in range(1, max_iters + 1):
            s = (r - rho) * (r + rho)
            if s <= 0.0:
                hi = rho
                rho = 0.5 * (lo + hi)
                continue
            f = rho * (k + 2.0 / s) - beta
            if f == 0.0:
                status = 0
                break
            if f < 0.0:
                lo = rho
            else:
                hi = rho
            df = k + 2.0 / s + 4.0 * rho * rho / (s * s)
            step = f / df
            if abs(step) <= 4e-16 * r:
                # converged: the Newton step is below the bracket's resolution
                rho = rho - step
                status = 0
                break
            nxt = rho - step
            if not (lo < nxt < hi):
                nxt = 0.5 * (lo + hi)
            if hi - lo <= 4e-16 * r:
                rho = nxt
                status = 0
                break
            rho = nxt
        rho_cap = np.sqrt(r * r * (1.0 - SLACK_FLOOR))
        if rho > rho_cap:
            rho = rho_cap
            status = 1
        scale = rho / beta
        for i in range(n):
            x[i] = center[i] + scale * b[i]
    zz = 0.0
    for i in range(n):
        zz += (x[i] - center[i]) ** 2
    s = r * r - zz
    gnorm2 = 0.0
    for i in range(n):
        gi = eta * (lin[i] + mass * x[i]) + 2.0 * (x[i] - center[i]) / s
        gnorm2 += gi * gi
    return x, np.sqrt(gnorm2), it, status


ball_argmin_jit = _njit(_ball_argmin_loop)


def ball_argmin_np(lin, mass, eta, center, radius, max_iters):
    lin = np.asarray(lin, dtype=float)
    center = np.asarray(center, dtype=float)
    b = -eta * (lin + mass * center)
    beta = float(np.sqrt(b @ b))
    r, k = float(radius), eta * mass
    it, status = 0, 0
    rho = 0.0
    if beta > 0.0:
        lo = 0.0
        hi = min(r, beta / (k + 2.0 / (r * r)))
        rho = hi if hi < r else 0.5 * r
        status = 2
        for it in range(1, max_iters + 1):
            s = (r - rho) * (r + rho)
            if s <= 0.0:
                hi = rho
                rho = 0.5 * (lo + hi)
                continue
            f = rho * (k + 2.0 / s) - beta
            if f == 0.0:
                status = 0
                break
            if f < 0.0:
                lo = rho
            else:
                hi = rho
            df = k + 2.0 / s + 4.0 * rho * rho / (s * s)
            step = f / df
            if abs(step) <= 4e-16 * r:
                # converged: the Newton step is below the bracket's resolution
                rho = rho - step
                status = 0
                break
            nxt = rho - step
            if not (lo < nxt < hi):
                nxt = 0.5 * (lo + hi)
            if hi - lo <= 4e-16 * r:
                rho = nxt
                status = 0
                break
            rho = nxt
        rho_cap = np.sqrt(r * r * (1.0 - SLACK_FLOOR))
        if rho > rho_cap:
            rho, status = rho_cap, 1
        x = center + (rho / beta) * b
    else:
        x = center.copy()
    z = x - center
    s = r * r - z @ z
    g = eta * (lin + mass * x) + 2.0 * z / s
    return x, float(np.sqrt(g @ g)), it, status


# ---------------------------------------------------------------------------
# Exact argmin of  eta*(lin.x + mass/2 |x|^2) - sum log(x - lo) - sum log(hi - x)
# over a box. The objective is separable; each coordinate solves
#   eta*(lin_i + mass*x) - 1/(x - lo_i) + 1/(hi_i - x) = 0,
# an increasing function on (lo_i, hi_i), by bracketed Newton. Slacks are kept
# at least SLACK_FLOOR * width. Same return convention as the ball kernel.
# ---------------------------------------------------------------------------

def _box_argmin_loop(lin, mass, eta, lower, upper, max_iters):
    n = lin.shape[0]
    x = np.empty(n)
    iters = 0
    status = 0
    gnorm2 = 0.0
    for i in range(n):
        a = lower[i]
        b = upper[i]
        w = b - a
        # resolution: relative to the endpoints too, since the bracket cannot shrink below an ulp
        res = 4e-16 * (w + abs(a) + abs(b))
        lo = a
        hi = b
        z = 0.5 * (a + b)
        code = 2
        it = 0
        for it in range(1, max_iters + 1):
            f = eta * (lin[i] + mass * z) - 1.0 / (z - a) + 1.0 / (b - z)
            if f == 0.0:
                code = 0
                break
            if f < 0.0:
                lo = z
            else:
                hi = z
            df = eta * mass + 1.0 / ((z - a) * (z - a)) + 1.0 / ((b - z) * (b - z))
            step = f / df
            if abs(step) <= res:
                # converged: the Newton step is below the bracket's resolution
                z = z - step
                code = 0
                break
            nxt = z - step
            if not (lo < nxt < hi):
                nxt = 0.5 * (lo + hi)
            if hi - lo <= res:
                z = nxt
                code = 0
                break
            z = nxt
        floor = SLACK_FLOOR * w
        if z - a < floor:
            z = a + floor
            code = max(code, 1)
        elif b - z < floor:
            z = b - floor
            code = max(code, 1)
        x[i] = z
        iters = max(iters, it)
        status = max(status, code)
        g = eta * (lin[i] + mass * z) - 1.0 / (z - a) + 1.0 / (b - z)
        gnorm2 += g * g
    return x, np.sqrt(gnorm2), iters, status


box_argmin_jit = _njit(_box_argmin_loop)


def box_argmin_np(lin, mass, eta, lower, upper, max_iters):
    lin = np.asarray(lin, dtype=float)
    lower = np.asarray(lower, dtype=float)
    upper = np.asarray(upper, dtype=float)
    k = eta * mass
    w = upper - lower
    res = 4e-16 * (w + np.abs(lower) + np.abs(upper))
    lo, hi = lower.copy(), upper.copy()
    z = 0.5 * (lower + upper)
    active = np.ones(lin.shape[0], dtype=bool)
    it = 0
    for it in range(1, max_iters + 1):
        f = eta * lin + k * z - 1.0 / (z - lower) + 1.0 / (upper - z)
        done = f == 0.0
        lo = np.where(active & (f < 0.0), z, lo)
        hi = np.where(active & (f > 0.0), z, hi)
        df = k + 1.0 / (z - lower) ** 2 + 1.0 / (upper - z) ** 2
        step = f / df
        small = np.abs(step) <= res
        nxt = z - step
        nxt = np.where(small | ((lo < nxt) & (nxt < hi)), nxt, 0.5 * (lo + hi))
        done |= small | (hi - lo <= res)
        z = np.where(active & ~(f == 0.0), nxt, z)
        active &= ~done
        if not active.any():
            break
    status = 2 if active.any() else 0
    floor = SLACK_FLOOR * w
    clamped = (z - lower < floor) | (upper - z < floor)
    z = np.where(z - lower < floor, lower + floor, z)
    z = np.where(upper - z < floor, upper - floor, z)
    if clamped.any():
        status = max(status, 1)
    g = eta * lin + k * z - 1.0 / (z - lower) + 1.0 / (upper - z)
    return z, float(np.sqrt(g @ g)), it, status


# ---------------------------------------------------------------------------
# Projected gradient (accelerated, with restart) for
#   min m^T P m + 2 q^T m   s.t. |m|_2 <= radius.
# Returns (m, projected_grad_norm, iterations).
# ---------------------------------------------------------------------------

def _ball_qp_pgd_loop(P, q, radius, m0, step, tol, max_iters):
    n = m0.shape[0]
    m = m0.copy()
    yk = m0.copy()
    grad = np.empty(n)
    nxt = np.empty(n)
    tk = 1.0
    pg = np.inf
    for it in range(max_iters):
        for i in range(n):
            acc = q[i]
            for k in range(n):
                acc += P[i, k] * yk[k]
            grad[i] = 2.0 * acc
        nrm = 0.0
        for i in range(n):
            nxt[i] = yk[i] - step * grad[i]
            nrm += nxt[i] * nxt[i]
        nrm = np.sqrt(nrm)
        if nrm > radius:
            for i in range(n):
                nxt[i] *= radius / nrm
        # projected-gradient residual at the extrapolated point
        pg = 0.0
        for i in range(n):
            pg += (yk[i] - nxt[i]) ** 2
        pg = np.sqrt(pg) / step
        if pg <= tol:
            for i in range(n):
                m[i] = nxt[i]
            return m, pg, it + 1
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        restart = 0.0
        for i in range(n):
            restart += (yk[i] - nxt[i]) * (nxt[i] - m[i])
        if restart > 0.0:
            t_new = 1.0
            for i in range(n):
                yk[i] = nxt[i]
        else:
            mom = (tk - 1.0) / t_new
            for i in range(n):
                yk[i] = nxt[i] + mom * (nxt[i] - m[i])
        for i in range(n):
            m[i] = nxt[i]
        tk = t_new
    return m, pg, max_iters


ball_qp_pgd_jit = _njit(_ball_qp_pgd_loop)


def ball_qp_pgd_np(P, q, radius, m0, step, tol, max_iters):
    m = np.array(m0, dtype=float)
    yk = m.copy()
    tk = 1.0
    pg = np.inf
    for it in range(max_iters):
        nxt = yk - step * 2.0 * (P @ yk + q)
        nrm = np.sqrt(nxt @ nxt)
        if nrm > radius:
            nxt *= radius / nrm
        pg = np.sqrt((yk - nxt) @ (yk - nxt)) / step
        if pg <= tol:
            return nxt, pg, it + 1
        t_new = 0.5 * (1.0 + np.sqrt(1.0 + 4.0 * tk * tk))
        if (yk - nxt) @ (nxt - m) > 0.0:
            t_new = 1.0
            yk = nxt.copy()
        else:
            yk = nxt + ((tk - 1.0) / t_new) * (nxt - m)
        m = nxt
        tk = t_new
    return m, pg, max_iters


if USE_JIT:
    lds_rollout = lds_rollout_jit
    markov_convolve = markov_convolve_jit
    drc_design = drc_design_jit
    moving_average = moving_average_jit
    ball_argmin = ball_argmin_jit
    box_argmin = box_argmin_jit
    ball_qp_pgd = ball_qp_pgd_jit
else:
    lds_rollout = lds_rollout_np
    markov_convolve = markov_convolve_np
    drc_design = drc_design_np
    moving_average = moving_average_np
    ball_argmin = ball_argmin_np
    box_argmin = box_argmin_np
    ball_qp_pgd = ball_qp_pgd_np
