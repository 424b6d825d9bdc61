"""Running attack statistics and the scenario sets built from them."""

from __future__ import annotations

import itertools
from dataclasses import dataclass, field

import numpy as np

DEDUP_TOL = 1e-9


@dataclass(frozen=True)
class AttackStats:
    """Per-channel count, mean and sum of squared deviations (Welford)."""

    count: int
    mean: np.ndarray
    m2: np.ndarray
    history: tuple[np.ndarray, ...] = field(default=(), repr=False)

    @classmethod
    def empty(cls, n_channels: int) -> "AttackStats":
        return cls(0, np.zeros(n_channels), np.zeros(n_channels))

    @property
    def n_channels(self) -> int:
        return self.mean.size

    @property
    def std(self) -> np.ndarray:
        if self.count < 2:
            return np.zeros_like(self.mean)
        return np.sqrt(self.m2 / (self.count - 1))


def update_stats(stats: AttackStats, a_star) -> AttackStats:
    a = np.asarray(a_star, dtype=float)
    if a.shape != stats.mean.shape:
        raise ValueError("suspicion dimension does not match the statistics")
    count = stats.count + 1
    delta = a - stats.mean
    mean = stats.mean + delta / count
    m2 = stats.m2 + delta * (a - mean)
    return AttackStats(count, mean, m2, stats.history + (a.copy(),))


def dedup_rows(rows: np.ndarray, tol: float = DEDUP_TOL) -> np.ndarray:
    kept: list[np.ndarray] = []
    for r in rows:
        if not any(np.max(np.abs(r - k), initial=0.0) <= tol for k in kept):
            kept.append(r)
    return np.array(kept).reshape(len(kept), rows.shape[1] if rows.ndim == 2 else 0)


def attack_scenarios(stats: AttackStats, tol: float = DEDUP_TOL) -> np.ndarray:
    """Product over channels of {mu, mu + sigma, mu - sigma}, duplicates removed."""
    sigma = stats.std
    per_channel = []
    for mu, sd in zip(stats.mean, sigma):
        vals = [mu] if sd <= tol else [mu, mu + sd, mu - sd]
        per_channel.append(vals)
    rows = np.array(list(itertools.product(*per_channel)), dtype=float)
    return dedup_rows(rows, tol)
