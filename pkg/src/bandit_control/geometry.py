"""Constraint sets with self-concordant barriers, Dikin ellipsoids, and sphere sampling."""
from dataclasses import dataclass
from typing import Optional

import numpy as np


class NotInteriorError(ValueError):
    pass


@dataclass(frozen=True)
class BarrierEval:
    value: float
    grad: np.ndarray
    hess: np.ndarray


@dataclass(frozen=True)
class ConstraintSet:
    """Euclidean ball or axis-aligned box in R^n.

    Barriers: ``-log(r^2 - |x - c|^2)`` for the ball (nu = 1) and
    ``sum -log(x_i - l_i) - log(u_i - x_i)`` for the box (nu = 2n).
    """

    kind: str
    center: Optional[np.ndarray] = None
    radius: Optional[float] = None
    lower: Optional[np.ndarray] = None
    upper: Optional[np.ndarray] = None

    def __post_init__(self):
        if self.kind == "ball":
            c = np.atleast_1d(np.asarray(self.center, dtype=float))
            if not self.radius > 0:
                raise ValueError("ball radius must be positive")
            object.__setattr__(self, "center", c)
            object.__setattr__(self, "radius", float(self.radius))
        elif self.kind == "box":
            lo = np.atleast_1d(np.asarray(self.lower, dtype=float))
            hi = np.atleast_1d(np.asarray(self.upper, dtype=float))
            if lo.shape != hi.shape or not np.all(lo < hi):
                raise ValueError("box needs lower < upper elementwise")
            object.__setattr__(self, "lower", lo)
            object.__setattr__(self, "upper", hi)
        else:
            raise ValueError(f"unknown constraint set kind {self.kind!r}")

    @classmethod
    def ball(cls, center, radius) -> "ConstraintSet":
        return cls("ball", center=center, radius=radius)

    @classmethod
    def box(cls, lower, upper) -> "ConstraintSet":
        return cls("box", lower=lower, upper=upper)

    @property
    def n(self) -> int:
        return self.center.shape[0] if self.kind == "ball" else self.lower.shape[0]

    @property
    def nu(self) -> float:
        return 1.0 if self.kind == "ball" else 2.0 * self.n

    def diameter(self) -> float:
        if self.kind == "ball":
            return 2.0 * self.radius
        return float(np.linalg.norm(self.upper - self.lower))

    def contains(self, x, tol: float = 0.0) -> bool:
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            return bool(np.linalg.norm(x - self.center) <= self.radius + tol)
        return bool(np.all(x >= self.lower - tol) and np.all(x <= self.upper + tol))

    def is_interior(self, x) -> bool:
        x = np.asarray(x, dtype=float)
        if self.kind == "ball":
            z = x - self.center
            return bool(self.radius ** 2 - z @ z > 0)
        return bool(np.all(x > self.lower) and np.all(x < self.upper))


def barrier_eval(cset: ConstraintSet, x) -> BarrierEval:
    x = np.asarray(x, dtype=float)
    if not cset.is_interior(x):
        raise NotInteriorError("not interior: barrier undefined on or outside the boundary")
    if cset.kind == "ball":
        z = x - cset.center
        s = cset.radius ** 2 - z @ z
        grad = 2.0 * z / s
        hess = (2.0 / s) * np.eye(z.shape[0]) + (4.0 / s ** 2) * np.outer(z, z)
        return BarrierEval(float(-np.log(s)), grad, hess)
    a = x - cset.lower
    b = cset.upper - x
    value = float(-np.sum(np.log(a)) - np.sum(np.log(b)))
    return BarrierEval(value, -1.0 / a + 1.0 / b, np.diag(1.0 / a ** 2 + 1.0 / b ** 2))


def analytic_center(cset: ConstraintSet) -> np.ndarray:
    if cset.kind == "ball":
        return cset.center.copy()
    return 0.5 * (cset.lower + cset.upper)


def dikin_contains(cset: ConstraintSet, x, v) -> bool:
    """Whether v lies in the unit Dikin ellipsoid of the barrier at x."""
    v = np.asarray(v, dtype=float)
    hess = barrier_eval(cset, x).hess
    return bool(v @ hess @ v <= 1.0)


@dataclass(frozen=True)
class InvSqrt:
    """A = M^{-1/2} together with A^{-1} = M^{1/2}, built from one eigendecomposition."""

    A: np.ndarray
    A_inv: np.ndarray


def inv_sqrt_psd_pair(M, clamp: float = 1e-12) -> InvSqrt:
    M = np.asarray(M, dtype=float)
    if M.ndim != 2 or M.shape[0] != M.shape[1]:
        raise ValueError(f"expected a square matrix, got {M.shape}")
    scale = max(1.0, float(np.max(np.abs(M))))
    if np.max(np.abs(M - M.T)) > 1e-10 * scale:
        raise ValueError("matrix is not symmetric")
    evals, V = np.linalg.eigh(0.5 * (M + M.T))
    lo = float(evals.min())
    if lo <= 0:
        raise ValueError(f"matrix is not positive definite (min eigenvalue {lo:.3e})")
    if lo < clamp:
        # clamping must not move the result by more than 1e-8 relative
        if (clamp - lo) / clamp > 1e-8:
            raise ValueError(f"matrix too close to singular (min eigenvalue {lo:.3e})")
        evals = np.maximum(evals, clamp)
    root = np.sqrt(evals)
    A = (V / root) @ V.T
    A_inv = (V * root) @ V.T
    return InvSqrt(0.5 * (A + A.T), 0.5 * (A_inv + A_inv.T))


def inv_sqrt_psd(M) -> np.ndarray:
    return inv_sqrt_psd_pair(M).A


def barrier_precond(cset: ConstraintSet, x, shift: float) -> InvSqrt:
    """(hess R(x) + shift I)^{-1/2} and its inverse in closed form.

    Ball: the Hessian is (2/s) I + (4/s^2) z z', so both roots act as scalars on
    span(z) and on its complement. Box: the Hessian is diagonal. Neither needs an
    eigendecomposition, which keeps the result accurate when s is tiny.
    """
    x = np.asarray(x, dtype=float)
    if not cset.is_interior(x):
        raise NotInteriorError("not interior: barrier undefined on or outside the boundary")
    n = x.shape[0]
    if cset.kind == "box":
        a = x - cset.lower
        b = cset.upper - x
        d = 1.0 / a ** 2 + 1.0 / b ** 2 + shift
        root = np.sqrt(d)
        return InvSqrt(np.diag(1.0 / root), np.diag(root))
    z = x - cset.center
    s = cset.radius ** 2 - z @ z
    alpha = 2.0 / s + shift
    zz = float(z @ z)
    root_perp = np.sqrt(alpha)
    root_par = np.sqrt(alpha + 4.0 * zz / s ** 2)
    if zz == 0.0:
        return InvSqrt(np.eye(n) / root_perp, np.eye(n) * root_perp)
    proj = np.outer(z, z) / zz
    perp = np.eye(n) - proj
    return InvSqrt(perp / root_perp + proj / root_par, perp * root_perp + proj * root_par)


def sample_unit_sphere(n: int, rng: np.random.Generator) -> np.ndarray:
    if n < 1:
        raise ValueError("n must be >= 1")
    while True:
        g = rng.standard_normal(n)
        nrm = np.linalg.norm(g)
        if nrm > 0:
            return g / nrm
