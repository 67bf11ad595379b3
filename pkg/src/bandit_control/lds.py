"""Linear dynamical systems, Markov operators, noise traces and quadratic costs."""
import csv
import io
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from . import _kernels


def _f64(a):
    return np.ascontiguousarray(a, dtype=np.float64)


def spectral_radius(A) -> float:
    A = np.asarray(A, dtype=float)
    if A.ndim != 2 or A.shape[0] != A.shape[1]:
        raise ValueError(f"spectral radius needs a square matrix, got shape {A.shape}")
    if A.size == 0:
        return 0.0
    # LAPACK geev balances then runs Hessenberg QR.
    return float(np.max(np.abs(np.linalg.eigvals(A))))


@dataclass(frozen=True)
class LdsParams:
    A: np.ndarray
    B: np.ndarray
    C: np.ndarray

    def __post_init__(self):
        A, B, C = (np.array(m, dtype=float, ndmin=2) for m in (self.A, self.B, self.C))
        if A.shape[0] != A.shape[1]:
            raise ValueError(f"A must be square, got {A.shape}")
        if B.shape[0] != A.shape[0]:
            raise ValueError(f"B has {B.shape[0]} rows, expected d_x={A.shape[0]}")
        if C.shape[1] != A.shape[0]:
            raise ValueError(f"C has {C.shape[1]} columns, expected d_x={A.shape[0]}")
        for name, m in (("A", A), ("B", B), ("C", C)):
            m.setflags(write=False)
            object.__setattr__(self, name, m)

    @classmethod
    def stable(cls, A, B, C) -> "LdsParams":
        """Construct, rejecting systems with spectral radius >= 1."""
        p = cls(A, B, C)
        rho = p.spectral_radius
        if rho >= 1.0:
            raise ValueError(f"unstable system: spectral radius {rho:.6g} >= 1")
        return p

    @property
    def d_x(self) -> int:
        return self.A.shape[0]

    @property
    def d_u(self) -> int:
        return self.B.shape[1]

    @property
    def d_y(self) -> int:
        return self.C.shape[0]

    @property
    def spectral_radius(self) -> float:
        return spectral_radius(self.A)

    def closed_loop(self, K) -> "LdsParams":
        """System seen by a controller adding ``K x`` to its own input."""
        K = np.atleast_2d(np.asarray(K, dtype=float))
        return LdsParams(self.A + self.B @ K, self.B, self.C)


def double_integrator() -> LdsParams:
    """The damped double integrator used throughout the experiments (C = I)."""
    return LdsParams([[0.9, 0.9], [-0.01, 0.9]], [[0.0], [1.0]], np.eye(2))


@dataclass
class LdsState:
    x: np.ndarray
    t: int = 0


def simulate_step(state: LdsState, params: LdsParams, u, w, e):
    """One step of the dynamics. Returns ``(next_state, y)`` with y read before the update."""
    x = np.asarray(state.x, dtype=float)
    u, w, e = (np.atleast_1d(np.asarray(v, dtype=float)) for v in (u, w, e))
    if x.shape != (params.d_x,) or u.shape != (params.d_u,) or w.shape != (params.d_x,) \
            or e.shape != (params.d_y,):
        raise ValueError(
            f"dimension mismatch: x{x.shape} u{u.shape} w{w.shape} e{e.shape} for "
            f"(d_x, d_u, d_y)=({params.d_x}, {params.d_u}, {params.d_y})")
    y = params.C @ x + e
    nxt = params.A @ x + params.B @ u + w
    return LdsState(nxt, state.t + 1), y


def rollout(params: LdsParams, controls, w, e, x0=None):
    """Open-loop rollout. Returns states ``X`` (T+1 rows) and observations ``Y`` (T rows)."""
    w = _f64(w)
    T = w.shape[0]
    U = _f64(np.zeros((T, params.d_u)) if controls is None else controls).reshape(T, params.d_u)
    x0 = np.zeros(params.d_x) if x0 is None else _f64(x0)
    return _kernels.lds_rollout(_f64(params.A), _f64(params.B), _f64(params.C), x0, U, w,
                                _f64(e).reshape(T, params.d_y))


# ---------------------------------------------------------------------------
# Markov operator
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class MarkovOperator:
    """Blocks G^[0..H_G-1], each d_y x d_u, stored as an (H_G, d_y, d_u) array."""

    blocks: np.ndarray

    def __post_init__(self):
        b = np.array(self.blocks, dtype=float)
        if b.ndim != 3 or b.shape[0] < 1:
            raise ValueError(f"blocks must have shape (H_G, d_y, d_u), got {b.shape}")
        b.setflags(write=False)
        object.__setattr__(self, "blocks", b)

    @property
    def H_G(self) -> int:
        return self.blocks.shape[0]

    @property
    def d_y(self) -> int:
        return self.blocks.shape[1]

    @property
    def d_u(self) -> int:
        return self.blocks.shape[2]

    def block_norms(self) -> np.ndarray:
        return np.array([np.linalg.norm(g, 2) for g in self.blocks])

    def l1_op_norm(self) -> float:
        return float(self.block_norms().sum())

    def truncated(self, H_G: int) -> "MarkovOperator":
        if H_G <= self.H_G:
            return MarkovOperator(self.blocks[:H_G])
        pad = np.zeros((H_G - self.H_G, self.d_y, self.d_u))
        return MarkovOperator(np.concatenate([self.blocks, pad]))

    @classmethod
    def zeros(cls, H_G, d_y, d_u) -> "MarkovOperator":
        return cls(np.zeros((H_G, d_y, d_u)))


def markov_operator(params: LdsParams, H_G: int) -> MarkovOperator:
    if H_G < 1:
        raise ValueError("H_G must be a positive integer")
    if params.spectral_radius >= 1.0:
        warnings.warn("Markov operator of an unstable system does not decay", RuntimeWarning)
    blocks = np.zeros((H_G, params.d_y, params.d_u))
    CA = params.C.copy()
    for i in range(1, H_G):
        blocks[i] = CA @ params.B
        CA = CA @ params.A
    return MarkovOperator(blocks)


@dataclass(frozen=True)
class DecayCertificate:
    kappa: float
    r: float
    norms: np.ndarray  # ||G^[i]||_op for i = 0..horizon

    def tail_norm(self, H: int) -> float:
        """Estimate of sum_{i >= H} ||G^[i]||_op: explicit sum plus geometric remainder."""
        horizon = self.norms.shape[0] - 1
        explicit = float(self.norms[H:].sum()) if H <= horizon else 0.0
        start = max(H, horizon + 1)
        if self.r == 0.0:
            return explicit
        remainder = self.kappa * self.r ** (start - 1) / (1.0 - self.r)
        return explicit + remainder


def decay_certificate(params: LdsParams, horizon: int = 200) -> DecayCertificate:
    """Find (kappa, r) with rho(A) <= r < 1 and ||G^[i]||_op <= kappa r^(i-1) for i <= horizon.

    r = rho(A) is tried first; it is accepted when the ratios ||G^[i]|| / r^(i-1)
    peak in the first three quarters of the horizon. Otherwise r is moved towards 1.
    """
    rho = params.spectral_radius
    if rho >= 1.0:
        raise ValueError(f"unstable system: spectral radius {rho:.6g} >= 1")
    norms = markov_operator(params, horizon + 1).block_norms()
    idx = np.arange(1, horizon + 1)
    base = rho if rho > 1e-12 else 0.5
    candidates = [base] + [base + (1.0 - base) * f for f in (0.125, 0.25, 0.5, 0.75)]
    for r in candidates:
        ratios = norms[1:] / r ** (idx - 1.0)
        peak = int(np.argmax(ratios))
        if peak < 0.75 * horizon or r == candidates[-1]:
            kappa = float(ratios[peak])
            return DecayCertificate(kappa, float(r), norms)
    raise AssertionError("unreachable")


# ---------------------------------------------------------------------------
# Noise traces
# ---------------------------------------------------------------------------

NOISE_KINDS = ("gaussian", "sinusoidal", "gaussian_walk", "composite")


@dataclass(frozen=True)
class NoiseParams:
    sigma_w: float = 0.1
    sigma_e: float = 0.1
    amplitude: float = 1.0
    period: float = 40.0
    walk_std: float = 0.1


@dataclass(frozen=True)
class NoiseTrace:
    """Perturbations stored as adversarial + stochastic parts; ``w`` and ``e`` are their sums."""

    w_adv: np.ndarray
    w_stoch: np.ndarray
    e_adv: np.ndarray
    e_stoch: np.ndarray
    kind: str = "gaussian"
    params: NoiseParams = field(default_factory=NoiseParams)
    seed: Optional[int] = None
    x0: Optional[np.ndarray] = None

    def __post_init__(self):
        T = self.w_adv.shape[0]
        for name in ("w_stoch", "e_adv", "e_stoch"):
            if getattr(self, name).shape[0] != T:
                raise ValueError(f"{name} has length {getattr(self, name).shape[0]}, expected {T}")

    @property
    def w(self) -> np.ndarray:
        return self.w_adv + self.w_stoch

    @property
    def e(self) -> np.ndarray:
        return self.e_adv + self.e_stoch

    @property
    def T(self) -> int:
        return self.w_adv.shape[0]

    @property
    def d_x(self) -> int:
        return self.w_adv.shape[1]

    @property
    def d_y(self) -> int:
        return self.e_adv.shape[1]

    def slice(self, start, stop=None) -> "NoiseTrace":
        s = np.s_[start:stop]
        return NoiseTrace(self.w_adv[s], self.w_stoch[s], self.e_adv[s], self.e_stoch[s],
                          self.kind, self.params, self.seed, None)

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t"] + [f"w_{i}" for i in range(self.d_x)] + [f"e_{i}" for i in range(self.d_y)])
        w, e = self.w, self.e
        for t in range(self.T):
            wr.writerow([t + 1] + [repr(float(v)) for v in w[t]] + [repr(float(v)) for v in e[t]])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "NoiseTrace":
        rows = list(csv.reader(io.StringIO(text)))
        header, body = rows[0], rows[1:]
        dx = sum(h.startswith("w_") for h in header)
        data = np.array([[float(v) for v in r[1:]] for r in body]).reshape(len(body), -1)
        w, e = data[:, :dx], data[:, dx:]
        return cls(w, np.zeros_like(w), e, np.zeros_like(e), kind="composite")

    def nat_norm_bound(self, params: LdsParams) -> float:
        """Empirical R_nat: the largest ||y^nat_t|| over the trace."""
        return float(np.max(np.linalg.norm(natures_y_rollout(params, self), axis=1)))


def make_noise(kind: str, params: NoiseParams, T: int, seed: int, d_x: int, d_y: int,
               rng: Optional[np.random.Generator] = None, x0_std: float = 0.0,
               require_strong_convexity: bool = False) -> NoiseTrace:
    """Generate a seeded perturbation trace.

    ``gaussian``      w ~ N(0, sigma_w^2 I)
    ``sinusoidal``    w = amplitude * sin(2 pi t / period) * 1  (+ gaussian part)
    ``gaussian_walk`` w_t = w_{t-1} + N(0, walk_std^2 I)        (+ gaussian part)
    ``composite``     sinusoid + walk + gaussian part
    Observation noise is always e ~ N(0, sigma_e^2 I).
    """
    if kind not in NOISE_KINDS:
        raise ValueError(f"unknown noise kind {kind!r}; expected one of {NOISE_KINDS}")
    if T < 1:
        raise ValueError("T must be >= 1")
    if require_strong_convexity and params.sigma_e <= 0:
        warnings.warn("sigma_e = 0: the stochastic observation component is degenerate",
                      RuntimeWarning)
    if rng is None:
        rng = np.random.default_rng(seed)
    # Draw order is fixed regardless of kind so a seed always means the same stream.
    w_gauss = rng.standard_normal((T, d_x))
    e_gauss = rng.standard_normal((T, d_y))
    steps = rng.standard_normal((T, d_x))
    x0 = rng.standard_normal(d_x) * x0_std if x0_std > 0 else None

    t = np.arange(1, T + 1, dtype=float)
    sine = params.amplitude * np.sin(2.0 * np.pi * t / params.period)[:, None] * np.ones((1, d_x))
    walk = np.cumsum(params.walk_std * steps, axis=0)
    w_adv = np.zeros((T, d_x))
    if kind in ("sinusoidal", "composite"):
        w_adv = w_adv + sine
    if kind in ("gaussian_walk", "composite"):
        w_adv = w_adv + walk
    w_stoch = params.sigma_w * w_gauss
    e_stoch = params.sigma_e * e_gauss
    return NoiseTrace(w_adv, w_stoch, np.zeros((T, d_y)), e_stoch, kind, params, seed, x0)


def natures_y_rollout(params: LdsParams, trace: NoiseTrace) -> np.ndarray:
    """Observations under zero control, starting from the trace's x0 (zero by default)."""
    if trace.d_x != params.d_x or trace.d_y != params.d_y:
        raise ValueError("trace dimensions do not match the system")
    _, Y = rollout(params, None, trace.w, trace.e, trace.x0)
    return Y


def recover_natures_y(y_t, controls, G: MarkovOperator):
    """y_t - sum_{i>=1} G^[i] u_{t-i}; ``controls`` is most-recent-first (u_{t-1}, u_{t-2}, ...)."""
    out = np.array(y_t, dtype=float)
    for i, u in enumerate(controls, start=1):
        if i >= G.H_G:
            break
        out -= G.blocks[i] @ np.asarray(u, dtype=float)
    return out


def recover_natures_y_series(Y, U, G: MarkovOperator) -> np.ndarray:
    """Vectorised recovery for a whole trajectory (row t uses controls before t)."""
    return _f64(Y) - _kernels.markov_convolve(_f64(G.blocks), _f64(U))


# ---------------------------------------------------------------------------
# Costs
# ---------------------------------------------------------------------------

@dataclass
class CostSpec:
    """Quadratic costs c_t(y, u) = y'Q_t y + u'R_t u.

    ``Q``/``R`` are matrices (time-invariant) unless ``provider`` is given, in which
    case ``provider(t)`` returns ``(Q_t, R_t)``. Curvature constants are computed from
    eigenvalues when not supplied.
    """

    Q: np.ndarray
    R: np.ndarray
    provider: Optional[Callable[[int], tuple]] = None
    sigma_c: Optional[float] = None
    beta_c: Optional[float] = None
    L_c: Optional[float] = None

    def __post_init__(self):
        self.Q = np.atleast_2d(np.asarray(self.Q, dtype=float))
        self.R = np.atleast_2d(np.asarray(self.R, dtype=float))
        lo, hi = self._bounds(self.Q, self.R)
        if self.sigma_c is None:
            self.sigma_c = lo
        if self.beta_c is None:
            self.beta_c = hi
        if self.L_c is None:
            self.L_c = 2.0 * self.beta_c
        self.check(self.Q, self.R)

    @staticmethod
    def _bounds(Q, R):
        for name, M in (("Q", Q), ("R", R)):
            if M.shape[0] != M.shape[1] or not np.allclose(M, M.T, atol=1e-12):
                raise ValueError(f"{name} must be square and symmetric")
        ev = np.concatenate([np.linalg.eigvalsh(Q), np.linalg.eigvalsh(R)])
        return float(ev.min()), float(ev.max())

    def check(self, Q, R):
        lo, hi = self._bounds(Q, R)
        if lo < -1e-12:
            raise ValueError(f"cost matrices must be PSD (min eigenvalue {lo:.3g})")
        if lo < self.sigma_c - 1e-12 or hi > self.beta_c + 1e-12:
            raise ValueError(f"cost eigenvalues [{lo:.4g}, {hi:.4g}] outside "
                             f"[sigma_c, beta_c] = [{self.sigma_c:.4g}, {self.beta_c:.4g}]")

    @classmethod
    def identity(cls, d_y: int, d_u: int) -> "CostSpec":
        return cls(np.eye(d_y), np.eye(d_u))

    def matrices(self, t: int):
        if self.provider is None:
            return self.Q, self.R
        Q, R = self.provider(t)
        return np.atleast_2d(Q), np.atleast_2d(R)

    @property
    def time_invariant(self) -> bool:
        return self.provider is None


def cost_eval(spec: CostSpec, t: int, y, u) -> float:
    Q, R = spec.matrices(t)
    y = np.atleast_1d(np.asarray(y, dtype=float))
    u = np.atleast_1d(np.asarray(u, dtype=float))
    return float(y @ Q @ y + u @ R @ u)


def cost_series(spec: CostSpec, Y, U) -> np.ndarray:
    """c_t for each row of Y, U (t is 1-based)."""
    Y = np.asarray(Y, dtype=float)
    U = np.asarray(U, dtype=float)
    if spec.time_invariant:
        return np.einsum("ti,ij,tj->t", Y, spec.Q, Y) + np.einsum("ti,ij,tj->t", U, spec.R, U)
    return np.array([cost_eval(spec, t + 1, Y[t], U[t]) for t in range(Y.shape[0])])


def ceil_sqrt(T: int) -> int:
    return math.isqrt(T - 1) + 1 if T > 0 else 0
