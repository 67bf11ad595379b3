"""Disturbance response controllers: u_t = sum_j M^[j] y^nat_{t-j}."""
import csv
import io
from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class DrcParams:
    """H blocks M^[0..H-1], each d_u x d_y, stored as an (H, d_u, d_y) array."""

    M: np.ndarray

    def __post_init__(self):
        M = np.array(self.M, dtype=float)
        if M.ndim != 3:
            raise ValueError(f"M must have shape (H, d_u, d_y), got {M.shape}")
        object.__setattr__(self, "M", M)

    @property
    def H(self) -> int:
        return self.M.shape[0]

    @property
    def d_u(self) -> int:
        return self.M.shape[1]

    @property
    def d_y(self) -> int:
        return self.M.shape[2]

    @classmethod
    def zeros(cls, H, d_u, d_y) -> "DrcParams":
        return cls(np.zeros((H, d_u, d_y)))

    def fro_norm(self) -> float:
        return float(np.linalg.norm(self.M.ravel()))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["j", "a", "b", "value"])
        for j in range(self.H):
            for a in range(self.d_u):
                for b in range(self.d_y):
                    wr.writerow([j, a, b, repr(float(self.M[j, a, b]))])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, text: str) -> "DrcParams":
        rows = list(csv.DictReader(io.StringIO(text)))
        H = 1 + max(int(r["j"]) for r in rows)
        du = 1 + max(int(r["a"]) for r in rows)
        dy = 1 + max(int(r["b"]) for r in rows)
        M = np.zeros((H, du, dy))
        for r in rows:
            M[int(r["j"]), int(r["a"]), int(r["b"])] = float(r["value"])
        return cls(M)


def flatten(M: DrcParams) -> np.ndarray:
    # C order gives idx = j*d_u*d_y + a*d_y + b
    return M.M.reshape(-1).copy()


def unflatten(v, H: int, d_u: int, d_y: int) -> DrcParams:
    v = np.asarray(v, dtype=float)
    if v.shape != (H * d_u * d_y,):
        raise ValueError(f"vector of shape {v.shape} does not match H*d_u*d_y = {H * d_u * d_y}")
    return DrcParams(v.reshape(H, d_u, d_y))


def l1_op_norm(M) -> float:
    blocks = M.M if isinstance(M, DrcParams) else np.asarray(M, dtype=float)
    if blocks.size == 0:
        return 0.0
    return float(np.linalg.norm(blocks, ord=2, axis=(1, 2)).sum())


def drc_control(M: DrcParams, ynat_recent) -> np.ndarray:
    """``ynat_recent`` holds y^nat_t, y^nat_{t-1}, ... (exactly H rows, zero-padded)."""
    Y = np.asarray(ynat_recent, dtype=float)
    if Y.shape != (M.H, M.d_y):
        raise ValueError(f"expected {M.H} nature's-y vectors of size {M.d_y}, got shape {Y.shape}")
    return np.einsum("jab,jb->a", M.M, Y)
