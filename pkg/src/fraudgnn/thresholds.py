"""Between-epoch adaptation of per-(layer, relation) preservation ratios.

Each controller is a two-action bandit: when the average distance of the
neighbours it selected shrank (or held) since the previous epoch the ratio
moves up by ``step``, otherwise down.  Once the last ``window`` rewards sum
to at least ``freeze_at`` the ratio is frozen for good.
"""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class RelationThreshold:
    p: float = 0.5
    step: float = 0.02
    window: int = 10
    freeze_at: int = 8
    last_distance: float | None = None
    rewards: deque = field(default_factory=deque)
    frozen: bool = False

    def __post_init__(self):
        if not self.step <= self.p <= 1.0:
            raise ValueError(f"threshold {self.p} outside [{self.step}, 1]")
        self.rewards = deque(self.rewards, maxlen=self.window)

    def observe(self, avg_distance: float) -> float:
        if math.isnan(avg_distance):
            raise ValueError("average distance is NaN")
        if self.frozen:
            return self.p
        prev, self.last_distance = self.last_distance, avg_distance
        if prev is None:
            return self.p
        reward = 1 if avg_distance <= prev else -1
        self.rewards.append(reward)
        self.p = min(1.0, max(self.step, self.p + self.step * reward))
        if sum(self.rewards) >= self.freeze_at:
            self.frozen = True
        return self.p


class ThresholdController:
    """Grid of :class:`RelationThreshold`, indexed ``[layer][relation]``."""

    def __init__(self, num_layers, num_relations, initial=0.5, step=0.02, window=10, freeze_at=8):
        self.cells = [
            [RelationThreshold(initial, step, window, freeze_at) for _ in range(num_relations)]
            for _ in range(num_layers)
        ]

    @property
    def shape(self):
        return len(self.cells), len(self.cells[0]) if self.cells else 0

    def thresholds(self) -> np.ndarray:
        return np.array([[c.p for c in row] for row in self.cells])

    def frozen(self) -> np.ndarray:
        return np.array([[c.frozen for c in row] for row in self.cells])

    def observe_epoch(self, avg_distance) -> np.ndarray:
        """Feed one epoch of average selected distances, shape (layers, relations).

        A NaN cell (nothing selected this epoch) is an error; callers pass
        the previous value when a relation saw no candidates.
        """
        avg = np.asarray(avg_distance, dtype=np.float64)
        if avg.shape != self.shape:
            raise ValueError(f"expected distances of shape {self.shape}, got {avg.shape}")
        if np.isnan(avg).any():
            raise ValueError("average distance is NaN")
        for row, vals in zip(self.cells, avg):
            for cell, v in zip(row, vals):
                cell.observe(float(v))
        return self.thresholds()
