"""False-data injection on actuator channels."""

from __future__ import annotations

import math
from typing import Sequence

import numpy as np

from .config import AttackSpec


class AttackStream:
    """Counter-based generator for one attack; draws are independent of other attacks."""

    def __init__(self, seed: int, index: int) -> None:
        seq = np.random.SeedSequence([int(seed), int(index)])
        self._gen = np.random.Generator(np.random.Philox(seq))

    def normal(self) -> float:
        # Box-Muller on two uniforms; 1 - u keeps the log argument in (0, 1]
        u1, u2 = self._gen.random(2)
        return math.sqrt(-2.0 * math.log(1.0 - u1)) * math.cos(2.0 * math.pi * u2)


def channel_index(channel: str, neighbors: Sequence[str]) -> int:
    names = ["g", "m"] + [f"tr_{n}" for n in neighbors]
    try:
        return names.index(channel)
    except ValueError:
        raise KeyError(f"unknown channel {channel!r}") from None


def inject_attack(spec: AttackSpec | None, t: float, rng: AttackStream | None, u=None,
                  neighbors: Sequence[str] = ()) -> np.ndarray:
    """Attack vector added to the commanded input ``u`` during the step starting at ``t``.

    A generator attack is truncated so the applied generator power stays
    nonnegative.
    """
    n_u = 2 + len(neighbors) if u is None else np.size(u)
    a = np.zeros(n_u)
    if spec is None or spec.kind == "none":
        return a
    i = channel_index(spec.channel, neighbors)
    val = spec.magnitude_kw
    if spec.kind == "constant_plus_gaussian":
        if rng is None:
            raise ValueError("a Gaussian attack needs a random stream")
        val += spec.stddev_kw * rng.normal()
    if u is not None and spec.channel == "g":
        val = max(val, -float(np.asarray(u)[i]))
    a[i] = val
    return a
