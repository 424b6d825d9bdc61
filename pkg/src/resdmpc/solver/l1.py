"""Nonnegative splitting of signed variables for l1 objectives."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class L1Split:
    """Maps 2n nonnegative variables (plus block, minus block) to n signed values."""

    n: int

    def __post_init__(self) -> None:
        if self.n < 1:
            raise ValueError("split needs at least one variable")

    @property
    def n_vars(self) -> int:
        return 2 * self.n

    def split(self, a) -> np.ndarray:
        a = np.asarray(a, dtype=float)
        return np.concatenate([np.maximum(a, 0.0), np.maximum(-a, 0.0)])

    def combine(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=float)
        return v[..., :self.n] - v[..., self.n:2 * self.n]

    def cost(self, v) -> float:
        return float(np.sum(np.asarray(v, dtype=float)[..., :2 * self.n]))

    def cost_vector(self) -> np.ndarray:
        return np.ones(2 * self.n)

    def combine_matrix(self) -> np.ndarray:
        """Matrix M with combine(v) = M v."""
        eye = np.eye(self.n)
        return np.hstack([eye, -eye])

    def lower(self) -> np.ndarray:
        return np.zeros(2 * self.n)

    def upper(self) -> np.ndarray:
        return np.full(2 * self.n, np.inf)


def l1_split(n: int) -> L1Split:
    return L1Split(n)
