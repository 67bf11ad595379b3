"""Per-trial records shared by every controller."""
import csv
import io
from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass
class TrialResult:
    cost: np.ndarray
    control_norm: np.ndarray
    policy_fro_norm: np.ndarray
    phase: list
    observations: Optional[np.ndarray] = None
    controls: Optional[np.ndarray] = None
    extras: dict = field(default_factory=dict)

    @property
    def T(self) -> int:
        return self.cost.shape[0]

    @property
    def total_cost(self) -> float:
        return float(np.sum(self.cost))

    def to_csv(self) -> str:
        buf = io.StringIO()
        wr = csv.writer(buf, lineterminator="\n")
        wr.writerow(["t", "cost", "control_norm", "policy_fro_norm", "phase"])
        for t in range(self.T):
            wr.writerow([t + 1, repr(float(self.cost[t])), repr(float(self.control_norm[t])),
                         repr(float(self.policy_fro_norm[t])), self.phase[t]])
        return buf.getvalue()

    @classmethod
    def concat(cls, first: "TrialResult", second: "TrialResult") -> "TrialResult":
        def cat(a, b):
            if a is None or b is None:
                return None
            return np.concatenate([a, b])

        extras = {**first.extras, **second.extras}
        return cls(np.concatenate([first.cost, second.cost]),
                   np.concatenate([first.control_norm, second.control_norm]),
                   np.concatenate([first.policy_fro_norm, second.policy_fro_norm]),
                   list(first.phase) + list(second.phase),
                   cat(first.observations, second.observations),
                   cat(first.controls, second.controls), extras)
