"""Coupled subsystem models and their step integrator.

A subsystem evolves in continuous time under a piecewise-constant input and
piecewise-constant neighbor couplings. One control step is integrated with
RK4; first-order lag states whose time constant is far below the substep are
advanced with their exact exponential response instead, because explicit RK4
is unstable on them.

Coupling coefficients use one constant basis function per interval, with the
coefficient equal to the coupling value reached at the end of the interval.

All callbacks are vectorized over leading batch axes.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Mapping, Sequence

import numpy as np

from .errors import IntegrationDiverged, MissingNeighborData

DEFAULT_SUBSTEPS = 8
# A lag is solved in closed form once substep / tau exceeds this ratio.
STIFF_RATIO = 1.0


@dataclass(frozen=True)
class Lag:
    """State ``state`` relaxes toward input ``input`` with time constant ``tau``."""

    state: int
    input: int
    tau: float


@dataclass(frozen=True)
class SubsystemModel:
    """Continuous-time local model x' = rhs(x, u + a, z_N, w).

    ``neighbor_dims[j]`` is the number of coupling coordinates received from
    ``neighbors[j]``; they are stacked in neighbor order to form z_N.
    ``coupling_fn`` and ``output_fn`` map states to z and y.
    """

    id: str
    n_x: int
    n_u: int
    n_y: int
    n_z: int
    rhs: Callable[..., np.ndarray]
    coupling_fn: Callable[[np.ndarray], np.ndarray]
    output_fn: Callable[[np.ndarray], np.ndarray]
    neighbors: tuple[str, ...] = ()
    neighbor_dims: tuple[int, ...] = ()
    n_w: int = 0
    n_g: int = 0
    constraint_fn: Callable[..., np.ndarray] | None = None
    x_lb: np.ndarray | None = None
    x_ub: np.ndarray | None = None
    u_lb: np.ndarray | None = None
    u_ub: np.ndarray | None = None
    lags: tuple[Lag, ...] = ()

    def __post_init__(self) -> None:
        if not self.neighbor_dims:
            object.__setattr__(self, "neighbor_dims", tuple(1 for _ in self.neighbors))
        if len(self.neighbor_dims) != len(self.neighbors):
            raise ValueError("neighbor_dims must match neighbors")
        inf = np.inf
        for name, n, fill in (("x_lb", self.n_x, -inf), ("x_ub", self.n_x, inf),
                              ("u_lb", self.n_u, -inf), ("u_ub", self.n_u, inf)):
            val = getattr(self, name)
            arr = np.full(n, fill) if val is None else np.asarray(val, dtype=float)
            if arr.shape != (n,):
                raise ValueError(f"{name} must have shape ({n},)")
            object.__setattr__(self, name, arr)

    @property
    def n_a(self) -> int:
        return self.n_u

    @property
    def n_zN(self) -> int:
        return int(sum(self.neighbor_dims))

    def neighbor_slice(self, neighbor: str) -> slice:
        j = self.neighbors.index(neighbor)
        start = int(sum(self.neighbor_dims[:j]))
        return slice(start, start + self.neighbor_dims[j])

    def stack_neighbors(self, values: Mapping[str, np.ndarray] | np.ndarray | None) -> np.ndarray:
        """Arrange per-neighbor coupling values into the z_N vector."""
        if values is None:
            if self.n_zN:
                raise MissingNeighborData(f"{self.id}: no neighbor data")
            return np.zeros(0)
        if isinstance(values, Mapping):
            parts = []
            for name, dim in zip(self.neighbors, self.neighbor_dims):
                if name not in values or values[name] is None:
                    raise MissingNeighborData(f"{self.id}: missing data from {name}")
                part = np.atleast_1d(np.asarray(values[name], dtype=float))
                if part.shape[-1] != dim:
                    raise MissingNeighborData(f"{self.id}: bad data shape from {name}")
                parts.append(part)
            return np.concatenate(parts, axis=-1) if parts else np.zeros(0)
        arr = np.asarray(values, dtype=float)
        if arr.shape[-1:] != (self.n_zN,) or not np.all(np.isfinite(arr)):
            raise MissingNeighborData(f"{self.id}: expected {self.n_zN} finite neighbor values")
        return arr


def _batch(arr, n: int, shape: tuple[int, ...]) -> np.ndarray:
    a = np.asarray(arr if arr is not None else np.zeros(n), dtype=float)
    return np.broadcast_to(a, shape + (n,))


def integrate_step(
    model: SubsystemModel,
    x: np.ndarray,
    v: np.ndarray,
    z_N: np.ndarray | None = None,
    w: np.ndarray | None = None,
    dt: float = 0.25,
    n_sub: int = DEFAULT_SUBSTEPS,
) -> np.ndarray:
    """Advance the state by one step of length ``dt`` under held input v = u + a."""
    if dt <= 0 or n_sub < 1:
        raise ValueError("dt and n_sub must be positive")
    x = np.asarray(x, dtype=float)
    batch = np.broadcast_shapes(x.shape[:-1], np.shape(v)[:-1],
                                np.shape(z_N)[:-1] if z_N is not None else (),
                                np.shape(w)[:-1] if w is not None else ())
    x = np.broadcast_to(x, batch + (model.n_x,)).copy()
    v = _batch(v, model.n_u, batch)
    z_N = _batch(z_N, model.n_zN, batch)
    w = _batch(w, model.n_w, batch)

    h = dt / n_sub
    fast = [lag for lag in model.lags if h / lag.tau > STIFF_RATIO]
    fi = np.array([lag.state for lag in fast], dtype=int)
    fu = np.array([lag.input for lag in fast], dtype=int)
    tau = np.array([lag.tau for lag in fast])
    target = v[..., fu]
    gap0 = x[..., fi] - target

    def fast_at(t: float) -> np.ndarray:
        return target + gap0 * np.exp(-t / tau)

    def f(state: np.ndarray, t: float) -> np.ndarray:
        if fi.size:
            state = state.copy()
            state[..., fi] = fast_at(t)
        return model.rhs(state, v, z_N, w)

    with np.errstate(over="ignore", invalid="ignore"):
        for i in range(n_sub):
            t = i * h
            k1 = f(x, t)
            k2 = f(x + 0.5 * h * k1, t + 0.5 * h)
            k3 = f(x + 0.5 * h * k2, t + 0.5 * h)
            k4 = f(x + h * k3, t + h)
            x = x + (h / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if fi.size:
            x[..., fi] = fast_at(dt)
    if not np.all(np.isfinite(x)):
        raise IntegrationDiverged(f"{model.id}: non-finite state after integration")
    return x


def chained_coupling(model: SubsystemModel, x, v, z_N=None, w=None, dt: float = 0.25,
                     n_sub: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Coupling value at the end of the step (h after f)."""
    return model.coupling_fn(integrate_step(model, x, v, z_N, w, dt, n_sub))


def chained_output(model: SubsystemModel, x, v, z_N=None, w=None, dt: float = 0.25,
                   n_sub: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Output at the end of the step (c after f)."""
    return model.output_fn(integrate_step(model, x, v, z_N, w, dt, n_sub))


def dense_coupling(model: SubsystemModel, x, v, z_N=None, w=None, dt: float = 0.25,
                   n_sub: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Coupling coefficient for the step; with one constant basis function it
    coincides with the end-of-step coupling value."""
    return chained_coupling(model, x, v, z_N, w, dt, n_sub)


def nominal_coupling_step(model: SubsystemModel, x, u,
                          neighbor_nominals: Mapping[str, np.ndarray] | np.ndarray | None,
                          dt: float = 0.25, n_sub: int = DEFAULT_SUBSTEPS) -> np.ndarray:
    """Nominal coupling coefficient: no attack, no parameter error, neighbors nominal."""
    z_N = model.stack_neighbors(neighbor_nominals)
    return dense_coupling(model, x, u, z_N, None, dt, n_sub)


@dataclass
class CouplingBlock:
    """Nominal and measured coupling coefficients of one subsystem for one step."""

    nominal: np.ndarray
    measured: np.ndarray

    @property
    def deviation(self) -> np.ndarray:
        return np.asarray(self.measured) - np.asarray(self.nominal)


@dataclass
class DistributedSystem:
    """A set of subsystems plus the routing of couplings between them.

    ``routes[I]`` lists, per neighbor of I in order, the coordinates of the
    neighbor's coupling vector that I receives.
    """

    models: dict[str, SubsystemModel]
    routes: dict[str, list[tuple[str, list[int]]]] = field(default_factory=dict)

    def __post_init__(self) -> None:
        for name, model in self.models.items():
            if name not in self.routes:
                raise ValueError(f"no routing for {name}")
            routed = self.routes[name]
            if [r[0] for r in routed] != list(model.neighbors):
                raise ValueError(f"routing for {name} does not follow its neighbor order")
            for (src, idx), dim in zip(routed, model.neighbor_dims):
                if src == name or src not in self.models:
                    raise ValueError(f"invalid neighbor {src} of {name}")
                if len(idx) != dim:
                    raise ValueError(f"routing width mismatch {src}->{name}")
                if name not in self.models[src].neighbors:
                    raise ValueError(f"asymmetric neighbor relation {src}-{name}")

    @property
    def ids(self) -> list[str]:
        return list(self.models)

    def incoming(self, name: str, couplings: Mapping[str, np.ndarray]) -> np.ndarray:
        """z_N for ``name`` from every subsystem's full coupling vector."""
        parts = [np.asarray(couplings[src])[..., idx] for src, idx in self.routes[name]]
        if not parts:
            return np.zeros(0)
        return np.concatenate(parts, axis=-1)

    def route_index(self, receiver: str, sender: str) -> list[int]:
        for src, idx in self.routes[receiver]:
            if src == sender:
                return idx
        raise KeyError(f"{sender} is not a neighbor of {receiver}")

    def plant_step(self, x: Mapping[str, np.ndarray], v: Mapping[str, np.ndarray],
                   dt: float, w: Mapping[str, np.ndarray] | None = None,
                   n_sub: int = DEFAULT_SUBSTEPS) -> dict[str, np.ndarray]:
        """Integrate all subsystems jointly with continuously exchanged couplings."""
        names = self.ids
        offsets = np.cumsum([0] + [self.models[n].n_x for n in names])
        u_offsets = np.cumsum([0] + [self.models[n].n_u for n in names])
        lags = []
        for i, n in enumerate(names):
            for lag in self.models[n].lags:
                lags.append(Lag(lag.state + offsets[i], lag.input + u_offsets[i], lag.tau))
        w = w or {}

        def rhs(xg, vg, _z, _w):
            parts = {n: xg[..., offsets[i]:offsets[i + 1]] for i, n in enumerate(names)}
            zs = {n: self.models[n].coupling_fn(parts[n]) for n in names}
            out = []
            for i, n in enumerate(names):
                m = self.models[n]
                out.append(m.rhs(parts[n], vg[..., u_offsets[i]:u_offsets[i + 1]],
                                 self.incoming(n, zs), np.asarray(w.get(n, np.zeros(m.n_w)))))
            return np.concatenate(out, axis=-1)

        joint = SubsystemModel(id="plant", n_x=int(offsets[-1]), n_u=int(u_offsets[-1]),
                               n_y=0, n_z=0, rhs=rhs, coupling_fn=lambda s: s[..., :0],
                               output_fn=lambda s: s[..., :0], lags=tuple(lags))
        xg = np.concatenate([np.asarray(x[n], dtype=float) for n in names])
        vg = np.concatenate([np.asarray(v[n], dtype=float) for n in names])
        out = integrate_step(joint, xg, vg, None, None, dt, n_sub)
        return {n: out[offsets[i]:offsets[i + 1]] for i, n in enumerate(names)}


def symmetric_routes(neighbors: Mapping[str, Sequence[str]]) -> dict[str, list[tuple[str, list[int]]]]:
    """Routing where subsystem L's coupling coordinate j is addressed to its j-th neighbor."""
    routes: dict[str, list[tuple[str, list[int]]]] = {}
    for name, nbrs in neighbors.items():
        routes[name] = [(src, [list(neighbors[src]).index(name)]) for src in nbrs]
    return routes
