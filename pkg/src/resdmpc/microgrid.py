"""Microgrid unit models, battery electrochemistry, and economic costs.

Units: kW, V, kA, kAh, hours. Battery resistance is given in mOhm and
converted to kW/kA^2 with ``MicrogridParams.resistance_scale``.

State layout per grid: (s, p_g, p_m, p_tr_1, ..., p_tr_n) with one transfer
per neighbor; inputs and attacks are (g, m, tr_1, ..., tr_n).
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from .dynamics import DistributedSystem, Lag, SubsystemModel, symmetric_routes
from .errors import InfeasibleChargePower, SocOutOfRange

S_EPS = 1e-3
SOC_FLOOR_OCP = 0.01

IDX_S, IDX_G, IDX_M, IDX_TR = 0, 1, 2, 3


@dataclass(frozen=True)
class OcvParams:
    alpha: float = 2.23
    beta: float = -0.001
    gamma: float = -0.35
    delta: float = 0.6851
    shape_exp: float = 3.0
    rate_exp: float = 1.6


@dataclass(frozen=True)
class CostParams:
    c_g: float = 0.2
    c_tr: float = 4.0
    c_st: float = 1.0
    c_dis: float = 2000.0
    c_flow_im: float = 4.0
    c_flow_ex: float = 0.04


@dataclass(frozen=True)
class UnitBounds:
    soc: tuple[float, float] = (0.0, 1.0)
    p_g: tuple[float, float] = (0.0, 1000.0)
    p_m: tuple[float, float] = (-1000.0, 2000.0)
    p_tr: tuple[float, float] = (-100.0, 100.0)


@dataclass(frozen=True)
class MicrogridParams:
    t_g: float = 0.1
    t_m: float = 0.001
    t_tr: float = 0.001
    q_st: float = 100.0
    r_st: float = 1.5
    # kW/kA^2 per mOhm used in the power equation of the battery.
    resistance_scale: float = 1e-3
    p_load: float = -2.0
    ocv: OcvParams = field(default_factory=OcvParams)
    cost: CostParams = field(default_factory=CostParams)
    bounds: UnitBounds = field(default_factory=UnitBounds)

    def __post_init__(self) -> None:
        if min(self.t_g, self.t_m, self.t_tr, self.q_st, self.r_st, self.resistance_scale) <= 0:
            raise ValueError("time constants, capacity and resistance must be positive")
        if self.p_load > 0:
            raise ValueError("load must be nonpositive")

    @property
    def r_eff(self) -> float:
        return self.r_st * self.resistance_scale


# -- battery ---------------------------------------------------------------

def _ocv_raw(s: np.ndarray, p: OcvParams) -> np.ndarray:
    t = -np.log(s)
    # odd extension keeps the curve real for s slightly above 1
    shaped = np.sign(t) * np.abs(t) ** p.shape_exp
    return p.alpha + p.beta * shaped + p.gamma * s + p.delta * np.exp(p.rate_exp * (s - 1.0))


def ocv(s, params: MicrogridParams | OcvParams) -> np.ndarray | float:
    """Open circuit voltage (V) at state of charge ``s``."""
    p = params.ocv if isinstance(params, MicrogridParams) else params
    s_arr = np.asarray(s, dtype=float)
    if np.any(s_arr < S_EPS) or not np.all(np.isfinite(s_arr)):
        raise SocOutOfRange(f"state of charge below {S_EPS}")
    out = _ocv_raw(s_arr, p)
    return float(out) if out.ndim == 0 else out


def _current(u: np.ndarray, r: float, p_st: np.ndarray) -> np.ndarray:
    # cancellation-free form of (-U + sqrt(U^2 + 4 R p)) / (2R)
    disc = np.maximum(u * u + 4.0 * r * p_st, 0.0)
    return 2.0 * p_st / (u + np.sqrt(disc))


def battery_current(s, p_st, params: MicrogridParams) -> np.ndarray | float:
    """Current (kA, discharge positive) drawn to deliver ``p_st`` kW."""
    u = np.asarray(ocv(s, params), dtype=float)
    p = np.asarray(p_st, dtype=float)
    r = params.r_eff
    if np.any(u * u + 4.0 * r * p < 0):
        raise InfeasibleChargePower("charging power beyond what the cell equation admits")
    out = _current(u, r, p)
    return float(out) if out.ndim == 0 else out


def soc_rate(s, p_st, params: MicrogridParams) -> np.ndarray | float:
    out = -np.asarray(battery_current(s, p_st, params)) / params.q_st
    return float(out) if out.ndim == 0 else out


def storage_power(state, z_N, params: MicrogridParams) -> np.ndarray:
    """Power drawn from storage so that the local balance closes exactly.

    ``z_N`` holds the transfers p_tr_LI sent by each neighbor toward this grid.
    """
    x = np.asarray(state, dtype=float)
    inflow = np.sum(np.asarray(z_N, dtype=float), axis=-1) if np.size(z_N) else 0.0
    outflow = np.sum(x[..., IDX_TR:], axis=-1)
    return -x[..., IDX_G] - x[..., IDX_M] - params.p_load - (inflow - outflow)


def microgrid_rhs(state, inputs, attack, z_N, params: MicrogridParams) -> np.ndarray:
    x = np.asarray(state, dtype=float)
    v = np.asarray(inputs, dtype=float) + np.asarray(attack, dtype=float)
    n = x.shape[-1] - IDX_TR
    tau = np.concatenate([[params.t_g, params.t_m], np.full(n, params.t_tr)])
    dx = np.empty(np.broadcast_shapes(x.shape, v.shape[:-1] + (x.shape[-1],)))
    dx[..., 1:] = (v - x[..., 1:]) / tau
    s = np.maximum(x[..., IDX_S], S_EPS)
    p_st = storage_power(x, z_N, params)
    dx[..., IDX_S] = -_current(_ocv_raw(s, params.ocv), params.r_eff, p_st) / params.q_st
    return dx


# -- costs -----------------------------------------------------------------

def stage_cost_q(p_g, p_tr, p_st, params: MicrogridParams) -> np.ndarray | float:
    c = params.cost
    tr = np.sum(np.square(np.asarray(p_tr, dtype=float)), axis=-1) if np.size(p_tr) else 0.0
    return c.c_g * np.square(p_g) + c.c_tr * tr + c.c_st * np.square(p_st)


def trade_cost_l(p_flow, p_m, prices: tuple[float, float], params: MicrogridParams):
    """Trading cost; ``p_flow`` is the net inflow p_tr_LI - p_tr_IL per neighbor."""
    c = params.cost
    f = np.asarray(p_flow, dtype=float)
    flows = (np.sum(c.c_flow_ex * np.minimum(f, 0.0) + c.c_flow_im * np.maximum(f, 0.0), axis=-1)
             if f.size else 0.0)
    im, ex = prices
    return flows + ex * np.minimum(p_m, 0.0) + im * np.maximum(p_m, 0.0)


def terminal_cost_m(s_0, s_T, params: MicrogridParams):
    return params.cost.c_dis * np.maximum(np.asarray(s_0) - np.asarray(s_T), 0.0) * params.q_st


@dataclass(frozen=True)
class PriceSchedule:
    """Daily piecewise-constant prices; the first matching interval wins."""

    import_: tuple[tuple[float, float, float], ...]
    export: tuple[tuple[float, float, float], ...]

    def __post_init__(self) -> None:
        grid = np.linspace(0.0, 24.0, 24 * 60, endpoint=False)
        for t in grid:
            if self._lookup(self.import_, t) < self._lookup(self.export, t):
                raise ValueError("import price must not fall below export price")

    @staticmethod
    def _lookup(table, t: float) -> float:
        for lo, hi, val in table:
            if lo <= t < hi:
                return val
        raise ValueError(f"no price defined at hour {t}")

    def at(self, t: float) -> tuple[float, float]:
        tod = float(t) % 24.0
        return self._lookup(self.import_, tod), self._lookup(self.export, tod)


DEFAULT_PRICES = PriceSchedule(
    import_=((15, 20, 275.0), (6, 9, 200.0), (20, 22, 200.0), (9, 15, 150.0), (22, 24, 150.0),
             (0, 24, 100.0)),
    export=((15, 20, 15.0), (6, 9, 10.0), (20, 22, 10.0), (0, 24, 0.0)),
)


def price_at(t: float, schedule: PriceSchedule = DEFAULT_PRICES) -> tuple[float, float]:
    return schedule.at(t)


# -- model construction ----------------------------------------------------

def build_microgrid(grid_id: str, neighbors: Sequence[str], params: MicrogridParams,
                    output_mask: Sequence[float] | None = None) -> SubsystemModel:
    n = len(neighbors)
    n_x = 3 + n
    mask = np.asarray(output_mask if output_mask is not None else [1, 1, 1] + [0] * n, dtype=float)
    if mask.shape != (n_x,):
        raise ValueError("output mask must match the state dimension")
    b = params.bounds
    x_lb = np.array([b.soc[0], b.p_g[0], b.p_m[0]] + [b.p_tr[0]] * n)
    x_ub = np.array([b.soc[1], b.p_g[1], b.p_m[1]] + [b.p_tr[1]] * n)
    lags = [Lag(IDX_G, 0, params.t_g), Lag(IDX_M, 1, params.t_m)]
    lags += [Lag(IDX_TR + j, 2 + j, params.t_tr) for j in range(n)]

    def rhs(x, v, z_N, w):
        return microgrid_rhs(x, v, 0.0, z_N, params)

    return SubsystemModel(
        id=grid_id, n_x=n_x, n_u=2 + n, n_y=n_x, n_z=n,
        rhs=rhs,
        coupling_fn=lambda x: x[..., IDX_TR:],
        output_fn=lambda x: x * mask,
        neighbors=tuple(neighbors),
        x_lb=x_lb, x_ub=x_ub, u_lb=x_lb[1:].copy(), u_ub=x_ub[1:].copy(),
        lags=tuple(lags),
    )


def channel_names(neighbors: Sequence[str]) -> list[str]:
    return ["g", "m"] + [f"tr_{n}" for n in neighbors]


@dataclass
class MicrogridCost:
    """Stage and terminal costs of one grid in the form the OCP assembler consumes.

    The smooth part is a weighted sum of squared affine functions of the
    end-of-interval state; the kinked trade terms are affine expressions that
    the assembler splits into positive and negative parts.
    """

    params: MicrogridParams
    n_neighbors: int
    prices: PriceSchedule = DEFAULT_PRICES

    @property
    def n_x(self) -> int:
        return 3 + self.n_neighbors

    def quadratic(self, z_N: np.ndarray):
        """Rows R, offsets r0 (batch, m) and weights w with q = sum w (R x + r0)^2."""
        n, c = self.n_neighbors, self.params.cost
        rows = np.zeros((2 + n, self.n_x))
        rows[0, IDX_G] = 1.0
        for j in range(n):
            rows[1 + j, IDX_TR + j] = 1.0
        # storage power as an affine function of the state
        rows[1 + n, IDX_G] = -1.0
        rows[1 + n, IDX_M] = -1.0
        rows[1 + n, IDX_TR:] = 1.0
        z = np.asarray(z_N, dtype=float)
        off = np.zeros(z.shape[:-1] + (2 + n,))
        off[..., 1 + n] = -self.params.p_load - (z.sum(axis=-1) if n else 0.0)
        weights = np.array([c.c_g] + [c.c_tr] * n + [c.c_st])
        return rows, off, weights

    def splits(self, z_N: np.ndarray):
        """Affine expressions (S x + s0) whose positive/negative parts are priced."""
        n = self.n_neighbors
        rows = np.zeros((1 + n, self.n_x))
        rows[0, IDX_M] = 1.0
        for j in range(n):
            rows[1 + j, IDX_TR + j] = -1.0
        z = np.asarray(z_N, dtype=float)
        off = np.zeros(z.shape[:-1] + (1 + n,))
        off[..., 1:] = z
        return rows, off

    def split_prices(self, t: np.ndarray):
        """Per-unit price of the positive part and revenue of the negative part."""
        t = np.atleast_1d(np.asarray(t, dtype=float))
        c = self.params.cost
        pos = np.empty((t.size, 1 + self.n_neighbors))
        neg = np.empty_like(pos)
        for i, ti in enumerate(t):
            im, ex = self.prices.at(ti)
            pos[i, 0], neg[i, 0] = im, ex
        pos[:, 1:] = c.c_flow_im
        neg[:, 1:] = c.c_flow_ex
        return pos, neg

    terminal_index: int = IDX_S

    @property
    def terminal_weight(self) -> float:
        return self.params.cost.c_dis * self.params.q_st


# -- benchmark ---------------------------------------------------------------

@dataclass(frozen=True)
class GridSpec:
    id: str
    q_st: float
    r_st: float
    c_g: float
    soc0: float
    neighbors: tuple[str, ...]


BENCHMARK_GRIDS = (
    GridSpec("MG1", 100.0, 1.5, 0.2, 0.9, ("MG2", "MG3")),
    GridSpec("MG2", 200.0, 2.0, 3.0, 0.5, ("MG1", "MG3")),
    GridSpec("MG3", 100.0, 3.0, 2.0, 0.6, ("MG1", "MG2")),
)


def grid_params(spec: GridSpec, base: MicrogridParams | None = None) -> MicrogridParams:
    base = base or MicrogridParams()
    return replace(base, q_st=spec.q_st, r_st=spec.r_st, cost=replace(base.cost, c_g=spec.c_g))


def build_network(grids: Sequence[GridSpec] = BENCHMARK_GRIDS,
                  base: MicrogridParams | None = None):
    """Models, parameters, initial states and the coupled system for a set of grids."""
    params = {g.id: grid_params(g, base) for g in grids}
    models = {g.id: build_microgrid(g.id, g.neighbors, params[g.id]) for g in grids}
    system = DistributedSystem(models, symmetric_routes({g.id: g.neighbors for g in grids}))
    x0 = {g.id: np.concatenate([[g.soc0], np.zeros(2 + len(g.neighbors))]) for g in grids}
    return system, params, x0


def realized_stage_cost(x_next, z_N_next, t: float, dt: float, params: MicrogridParams,
                        prices: PriceSchedule = DEFAULT_PRICES) -> float:
    """Cost of one step priced on the powers reached at its end."""
    x = np.asarray(x_next, dtype=float)
    z = np.asarray(z_N_next, dtype=float)
    p_st = storage_power(x, z, params)
    q = stage_cost_q(x[IDX_G], x[IDX_TR:], p_st, params)
    flows = z - x[IDX_TR:]
    l = trade_cost_l(flows, x[IDX_M], prices.at(t), params)
    return float(dt * (q + l))
