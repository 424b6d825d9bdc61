"""Central finite-difference Jacobians."""

from __future__ import annotations

from typing import Callable

import numpy as np

from ..errors import DerivativeFailure


def default_steps(v: np.ndarray) -> np.ndarray:
    return 1e-6 * np.maximum(1.0, np.abs(v))


def fd_jacobian(fn: Callable[[np.ndarray], np.ndarray], v, h=None) -> np.ndarray:
    """J[i, j] ~ d fn_i / d v_j by central differences."""
    v = np.asarray(v, dtype=float).ravel()
    steps = default_steps(v) if h is None else np.broadcast_to(np.asarray(h, dtype=float), v.shape)
    if np.any(steps <= 0):
        raise ValueError("finite-difference step must be positive")
    cols = []
    for j in range(v.size):
        vp, vm = v.copy(), v.copy()
        vp[j] += steps[j]
        vm[j] -= steps[j]
        fp = np.atleast_1d(np.asarray(fn(vp), dtype=float))
        fm = np.atleast_1d(np.asarray(fn(vm), dtype=float))
        if not (np.all(np.isfinite(fp)) and np.all(np.isfinite(fm))):
            raise DerivativeFailure(f"non-finite evaluation while differencing coordinate {j}")
        cols.append((fp - fm) / (2.0 * steps[j]))
    if not cols:
        return np.zeros((np.atleast_1d(fn(v)).size, 0))
    return np.stack(cols, axis=-1)


def fd_jacobian_batched(fn: Callable[[np.ndarray], np.ndarray], V: np.ndarray) -> np.ndarray:
    """Jacobians of a row-wise map for every row of ``V`` at once.

    ``fn`` maps (B, n) to (B, m); returns (B, m, n).
    """
    V = np.asarray(V, dtype=float)
    B, n = V.shape
    steps = default_steps(V)
    out = None
    for j in range(n):
        Vp, Vm = V.copy(), V.copy()
        Vp[:, j] += steps[:, j]
        Vm[:, j] -= steps[:, j]
        Fp = np.asarray(fn(Vp), dtype=float)
        Fm = np.asarray(fn(Vm), dtype=float)
        if not (np.all(np.isfinite(Fp)) and np.all(np.isfinite(Fm))):
            raise DerivativeFailure(f"non-finite evaluation while differencing coordinate {j}")
        col = (Fp - Fm) / (2.0 * steps[:, j:j + 1])
        if out is None:
            out = np.empty((B, col.shape[1], n))
        out[:, :, j] = col
    return out if out is not None else np.zeros((B, 0, 0))
