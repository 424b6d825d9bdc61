"""Contract-based multi-stage MPC for one subsystem.

The controller branches the future on a finite set of attack values,
neighbor-coupling values taken from the neighbors' contracts, and parameter
values. Branching stops after the robust horizon; every branch then
continues as a chain. Each tree node carries one input variable, so inputs
are non-anticipative by construction. After solving, the spread of the own
coupling over all branches becomes the new contract sent to the neighbors.
"""

from __future__ import annotations

import itertools
import logging
from dataclasses import dataclass, field
from typing import Protocol, Sequence

import numpy as np
import scipy.sparse as sp

from .adapt import dedup_rows
from .dynamics import SubsystemModel, dense_coupling, integrate_step
from .errors import AssemblyError, TreeTooLarge
from .solver import NlpProblem, SolveReport, Status, fd_jacobian_batched, solve

log = logging.getLogger(__name__)

MAX_LEAVES = 729
CONTRACT_MARGIN = 1e-3
LABELS = ("lo", "mid", "hi")


# -- contracts ---------------------------------------------------------------

@dataclass(frozen=True)
class Contract:
    """Per-stage interval bounds on a subsystem's coupling coefficients.

    Row l covers the step ``start + l``.
    """

    owner: str
    start: int
    lo: np.ndarray
    hi: np.ndarray
    dt: float = 0.25

    def __post_init__(self) -> None:
        lo = np.atleast_2d(np.asarray(self.lo, dtype=float))
        hi = np.atleast_2d(np.asarray(self.hi, dtype=float))
        if lo.shape != hi.shape:
            raise ValueError("contract bounds must have equal shapes")
        if np.any(lo > hi + 1e-12):
            raise ValueError("contract lower bound exceeds upper bound")
        object.__setattr__(self, "lo", lo)
        object.__setattr__(self, "hi", np.maximum(hi, lo))

    @classmethod
    def point(cls, owner: str, start: int, value, stages: int, dt: float = 0.25) -> "Contract":
        v = np.tile(np.atleast_1d(np.asarray(value, dtype=float)), (stages, 1))
        return cls(owner, start, v, v.copy(), dt)

    @property
    def stages(self) -> int:
        return self.lo.shape[0]

    @property
    def times(self) -> np.ndarray:
        return (self.start + np.arange(self.stages)) * self.dt

    def window(self, step: int, n: int) -> tuple[np.ndarray, np.ndarray]:
        """Bounds for steps step..step+n-1, repeating the edge rows outside the cover."""
        idx = np.clip(np.arange(step, step + n) - self.start, 0, self.stages - 1)
        return self.lo[idx], self.hi[idx]


# -- scenario tree -------------------------------------------------------------

@dataclass
class ScenarioTree:
    """Nodes indexed breadth-first; node 0 is the root at stage 0.

    ``attack``, ``z_N`` and ``w`` hold the realization on the edge entering
    each node (zeros for the root). Inner nodes (stage < n_stages) own one
    input each; the leaves below a node form its non-anticipativity group.
    """

    n_stages: int
    start_step: int
    parent: np.ndarray
    stage: np.ndarray
    realization: np.ndarray
    attack: np.ndarray
    z_N: np.ndarray
    w: np.ndarray
    realizations: list[tuple]
    weights: np.ndarray
    x0: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.parent.size

    @property
    def leaves(self) -> np.ndarray:
        return np.flatnonzero(self.stage == self.n_stages)

    @property
    def inner(self) -> np.ndarray:
        return np.flatnonzero(self.stage < self.n_stages)

    def path(self, leaf: int) -> list[int]:
        out = [int(leaf)]
        while self.parent[out[-1]] >= 0:
            out.append(int(self.parent[out[-1]]))
        return out[::-1]

    def groups(self) -> dict[int, list[int]]:
        """Inner node -> indices of the scenarios (leaves) passing through it."""
        groups: dict[int, list[int]] = {int(n): [] for n in self.inner}
        for s, leaf in enumerate(self.leaves):
            for node in self.path(leaf)[:-1]:
                groups[node].append(s)
        return groups

    def node_weights(self) -> np.ndarray:
        """Probability mass of the scenarios through each node."""
        wts = np.zeros(self.n_nodes)
        for s, leaf in enumerate(self.leaves):
            for node in self.path(leaf):
                wts[node] += self.weights[s]
        return wts


def coupling_labels(lo: np.ndarray, hi: np.ndarray, tol: float = 1e-9) -> tuple[str, ...]:
    return ("mid",) if np.max(np.abs(hi - lo), initial=0.0) <= tol else LABELS


def _label_value(label: str, lo: np.ndarray, hi: np.ndarray) -> np.ndarray:
    if label == "lo":
        return lo
    if label == "hi":
        return hi
    return 0.5 * (lo + hi)


def build_tree(x_k, attack_set, neighbor_contracts: Sequence[Contract], param_set, n_p: int,
               robust_horizon: int = 1, start_step: int = 0,
               components: Sequence[Sequence[int]] | None = None,
               max_leaves: int = MAX_LEAVES, n_u: int | None = None) -> ScenarioTree:
    if n_p < 1 or robust_horizon < 0:
        raise ValueError("horizon must be positive and robust horizon nonnegative")
    attacks = np.atleast_2d(np.asarray(attack_set, dtype=float))
    if attacks.size == 0:
        if n_u is None:
            raise ValueError("empty attack set needs n_u")
        attacks = np.zeros((1, n_u))
    attacks = dedup_rows(attacks)
    params = np.asarray(param_set if param_set is not None else np.zeros((1, 0)), dtype=float)
    params = dedup_rows(params.reshape(max(params.shape[0], 1), -1) if params.ndim == 2
                        else params.reshape(1, -1))

    # per incoming coordinate: stage-wise bounds and the labels to branch on
    bounds: list[tuple[np.ndarray, np.ndarray]] = []
    for j, contract in enumerate(neighbor_contracts):
        lo, hi = contract.window(start_step, n_p)
        cols = range(lo.shape[1]) if components is None else components[j]
        for c in cols:
            bounds.append((lo[:, c], hi[:, c]))
    label_sets = [coupling_labels(lo, hi) for lo, hi in bounds]

    realizations = list(itertools.product(range(attacks.shape[0]), itertools.product(*label_sets),
                                          range(params.shape[0])))
    n_r = min(robust_horizon, n_p)
    n_leaves = len(realizations) ** n_r
    if n_leaves > max_leaves:
        raise TreeTooLarge(f"{n_leaves} scenarios exceed the cap of {max_leaves}")

    parent, stage, real = [-1], [0], [-1]
    frontier = [0]
    for l in range(n_p):
        nxt = []
        for node in frontier:
            choices = range(len(realizations)) if l < n_r else [real[node]]
            for r in choices:
                parent.append(node)
                stage.append(l + 1)
                real.append(r)
                nxt.append(len(parent) - 1)
        frontier = nxt

    parent_a = np.array(parent)
    stage_a = np.array(stage)
    real_a = np.array(real)
    n_nodes = parent_a.size
    n_zN = len(bounds)
    attack = np.zeros((n_nodes, attacks.shape[1]))
    z_N = np.zeros((n_nodes, n_zN))
    w = np.zeros((n_nodes, params.shape[1]))
    for node in range(1, n_nodes):
        ai, labels, pi = realizations[real_a[node]]
        l = stage_a[node] - 1
        attack[node] = attacks[ai]
        w[node] = params[pi]
        for c, (lab, (lo, hi)) in enumerate(zip(labels, bounds)):
            z_N[node, c] = _label_value(lab, lo[l], hi[l])
    n_leaf = int(np.sum(stage_a == n_p))
    return ScenarioTree(n_p, start_step, parent_a, stage_a, real_a, attack, z_N, w,
                        realizations, np.full(n_leaf, 1.0 / n_leaf),
                        np.asarray(x_k, dtype=float).copy())


# -- OCP ---------------------------------------------------------------------

class OcpCost(Protocol):
    """Costs priced on the state reached at the end of each interval."""

    terminal_index: int

    @property
    def terminal_weight(self) -> float: ...

    def quadratic(self, z_N: np.ndarray): ...

    def splits(self, z_N: np.ndarray): ...

    def split_prices(self, t: np.ndarray): ...


@dataclass
class OcpLayout:
    n_x: int
    n_u: int
    n_s: int
    n_nodes: int
    n_inner: int
    n_leaves: int

    @property
    def x_off(self) -> int:
        return 0

    @property
    def u_off(self) -> int:
        return self.n_nodes * self.n_x

    @property
    def pp_off(self) -> int:
        return self.u_off + self.n_inner * self.n_u

    @property
    def pm_off(self) -> int:
        return self.pp_off + (self.n_nodes - 1) * self.n_s

    @property
    def h_off(self) -> int:
        return self.pm_off + (self.n_nodes - 1) * self.n_s

    @property
    def n_vars(self) -> int:
        return self.h_off + self.n_leaves


@dataclass
class OcpProblem:
    nlp: NlpProblem
    tree: ScenarioTree
    model: SubsystemModel
    layout: OcpLayout
    dt: float
    contract_bounds: tuple[np.ndarray, np.ndarray] | None
    x_lb: np.ndarray
    x_ub: np.ndarray

    def unpack(self, v: np.ndarray):
        L = self.layout
        X = v[:L.u_off].reshape(L.n_nodes, L.n_x)
        U = v[L.u_off:L.pp_off].reshape(L.n_inner, L.n_u)
        return X, U

    def initial_guess(self, u_stage: np.ndarray | None = None) -> np.ndarray:
        """Forward simulation of the tree with per-stage inputs (default: zeros)."""
        tree, L, m = self.tree, self.layout, self.model
        if u_stage is None:
            u_stage = np.zeros((tree.n_stages, L.n_u))
        u_stage = np.clip(np.asarray(u_stage, dtype=float), m.u_lb, m.u_ub)
        X = np.zeros((L.n_nodes, L.n_x))
        X[0] = tree.x0
        inner_pos = np.full(L.n_nodes, -1)
        inner_pos[tree.inner] = np.arange(L.n_inner)
        U = u_stage[tree.stage[tree.inner]]
        for l in range(1, tree.n_stages + 1):
            nodes = np.flatnonzero(tree.stage == l)
            par = tree.parent[nodes]
            X[nodes] = integrate_step(m, X[par], U[inner_pos[par]] + tree.attack[nodes],
                                      tree.z_N[nodes], tree.w[nodes], self.dt)
        X[1:] = np.clip(X[1:], self.x_lb, self.x_ub)
        v = np.zeros(L.n_vars)
        v[:L.u_off] = X.ravel()
        v[L.u_off:L.pp_off] = U.ravel()
        split_vals = self._split_values(X)
        v[L.pp_off:L.pm_off] = np.maximum(split_vals, 0).ravel()
        v[L.pm_off:L.h_off] = np.maximum(-split_vals, 0).ravel()
        leaves = tree.leaves
        idx = self._cost.terminal_index
        v[L.h_off:] = np.maximum(X[0, idx] - X[leaves, idx], 0.0)
        return v

    _cost: OcpCost = None  # set by assemble_ocp

    def _split_values(self, X):
        S, s0 = self._cost.splits(self.tree.z_N[1:])
        return X[1:] @ S.T + s0


def assemble_ocp(tree: ScenarioTree, model: SubsystemModel, cost: OcpCost,
                 prev_contract: Contract | None = None, dt: float = 0.25,
                 x_bounds: tuple[np.ndarray, np.ndarray] | None = None,
                 n_sub: int | None = None) -> OcpProblem:
    n_x, n_u, n_zN = model.n_x, model.n_u, model.n_zN
    if tree.x0.shape != (n_x,):
        raise AssemblyError("initial state does not match the model")
    if tree.attack.shape[1] != n_u:
        raise AssemblyError("attack scenarios do not match the input dimension")
    if tree.z_N.shape[1] != n_zN:
        raise AssemblyError("coupling scenarios do not match the incoming coupling dimension")
    if tree.w.shape[1] not in (0, model.n_w) or (model.n_w and tree.w.shape[1] != model.n_w):
        raise AssemblyError("parameter scenarios do not match the model")
    S_rows, _ = cost.splits(np.zeros((1, n_zN)))
    R_rows, _, q_w = cost.quadratic(np.zeros((1, n_zN)))
    if S_rows.shape[1] != n_x or R_rows.shape[1] != n_x:
        raise AssemblyError("cost expressions do not match the state dimension")
    n_s = S_rows.shape[0]
    sub = {} if n_sub is None else {"n_sub": n_sub}

    inner = tree.inner
    leaves = tree.leaves
    L = OcpLayout(n_x, n_u, n_s, tree.n_nodes, inner.size, leaves.size)
    n = L.n_vars
    E = tree.n_nodes - 1
    edges = np.arange(1, tree.n_nodes)
    par = tree.parent[edges]
    inner_pos = np.full(tree.n_nodes, -1)
    inner_pos[inner] = np.arange(inner.size)
    upar = inner_pos[par]
    a_e, z_e, w_e = tree.attack[edges], tree.z_N[edges], tree.w[edges]
    omega = tree.node_weights()[edges]
    t_e = (tree.start_step + tree.stage[edges] - 1) * dt

    _, r0, _ = cost.quadratic(z_e)
    _, s0 = cost.splits(z_e)
    c_pos, c_neg = cost.split_prices(t_e)
    tw = cost.terminal_weight
    tidx = cost.terminal_index

    # index helpers
    def xi(nodes):
        return (np.asarray(nodes)[:, None] * n_x + np.arange(n_x)).ravel()

    ui = (L.u_off + upar[:, None] * n_u + np.arange(n_u))          # (E, n_u)
    xe = (edges[:, None] * n_x + np.arange(n_x))                    # (E, n_x)
    xp = (par[:, None] * n_x + np.arange(n_x))
    pp = L.pp_off + np.arange(E * n_s).reshape(E, n_s)
    pm = L.pm_off + np.arange(E * n_s).reshape(E, n_s)
    hs = L.h_off + np.arange(leaves.size)

    # constant objective Hessian: 2 dt omega R' diag(w) R per edge
    block = 2.0 * dt * (R_rows.T * q_w) @ R_rows
    rows = np.repeat(xe, n_x, axis=1).ravel()
    cols = np.tile(xe, (1, n_x)).ravel()
    vals = (omega[:, None, None] * block[None]).reshape(E, -1).ravel()
    H_obj = sp.csr_matrix((vals, (rows, cols)), shape=(n, n))
    lin = np.zeros(n)
    lin[pp] = dt * omega[:, None] * c_pos
    lin[pm] = -dt * omega[:, None] * c_neg
    lin[hs] = tw * tree.weights

    def quad_res(v):
        return v[xe] @ R_rows.T + r0

    def objective(v):
        res = quad_res(v)
        return float(dt * np.sum(omega[:, None] * q_w * res ** 2) + lin @ v)

    def objective_grad(v):
        g = lin.copy()
        res = quad_res(v)
        np.add.at(g, xe, 2.0 * dt * omega[:, None] * (res * q_w) @ R_rows)
        return g

    # dynamics with a cache shared by constraint and Jacobian callbacks
    cache: dict = {}

    def propagate(v):
        key = v.tobytes()
        if cache.get("key") != key:
            cache.clear()
            cache["key"] = key
            cache["F"] = integrate_step(model, v[xp], v[ui] + a_e, z_e, w_e, dt, **sub)
        return cache["F"]

    def dyn_jac(v):
        if "J" not in cache or cache.get("key") != v.tobytes():
            propagate(v)
            Z = np.hstack([v[xp], v[ui] + a_e])

            def fn(Zb):
                return integrate_step(model, Zb[:, :n_x], Zb[:, n_x:], z_e, w_e, dt, **sub)
            cache["J"] = fd_jacobian_batched(fn, Z)
        return cache["J"]

    n_eq = n_x + E * n_x + E * n_s

    def eq(v):
        out = np.empty(n_eq)
        out[:n_x] = v[:n_x] - tree.x0
        out[n_x:n_x + E * n_x] = (v[xe] - propagate(v)).ravel()
        out[n_x + E * n_x:] = (v[xe] @ S_rows.T + s0 - (v[pp] - v[pm])).ravel()
        return out

    # constant parts of the equality Jacobian
    r_dyn = n_x + np.arange(E * n_x).reshape(E, n_x)
    r_spl = n_x + E * n_x + np.arange(E * n_s).reshape(E, n_s)
    const_r = [np.arange(n_x), r_dyn.ravel()]
    const_c = [np.arange(n_x), xe.ravel()]
    const_v = [np.ones(n_x), np.ones(E * n_x)]
    Sr, Sc = np.nonzero(S_rows)
    const_r += [r_spl[:, Sr].ravel(), r_spl.ravel(), r_spl.ravel()]
    const_c += [xe[:, Sc].ravel(), pp.ravel(), pm.ravel()]
    const_v += [np.tile(S_rows[Sr, Sc], E), -np.ones(E * n_s), np.ones(E * n_s)]
    const_r, const_c, const_v = map(np.concatenate, (const_r, const_c, const_v))
    dyn_rows = np.repeat(r_dyn[:, :, None], n_x + n_u, axis=2)
    dyn_cols = np.concatenate([np.repeat(xp[:, None, :], n_x, axis=1),
                               np.repeat(ui[:, None, :], n_x, axis=1)], axis=2)

    def eq_jac(v):
        J = dyn_jac(v)
        r = np.concatenate([const_r, dyn_rows.ravel()])
        c = np.concatenate([const_c, dyn_cols.ravel()])
        vals_ = np.concatenate([const_v, -J.ravel()])
        return sp.csr_matrix((vals_, (r, c)), shape=(n_eq, n))

    # inequalities: terminal hinge, own-contract consistency, path constraints
    ineq_parts = []
    xl_idx = leaves[:, None] * n_x + tidx
    n_leaf = leaves.size
    hinge_r = np.concatenate([np.arange(n_leaf)] * 3)
    hinge_c = np.concatenate([np.full(n_leaf, tidx), xl_idx.ravel(), hs])
    hinge_v = np.concatenate([np.ones(n_leaf), -np.ones(n_leaf), -np.ones(n_leaf)])
    ineq_parts.append((n_leaf,
                       lambda v: v[tidx] - v[xl_idx.ravel()] - v[hs],
                       lambda v: (hinge_r, hinge_c, hinge_v)))

    contract_bounds = None
    if prev_contract is not None:
        lo, hi = prev_contract.window(tree.start_step, tree.n_stages)
        if lo.shape[1] != model.n_z:
            raise AssemblyError("contract width does not match the coupling dimension")
        l_e = tree.stage[edges] - 1
        lo_e, hi_e = lo[l_e], hi[l_e]
        contract_bounds = (lo, hi)
        n_z = model.n_z

        def coup(v):
            return model.coupling_fn(v[xe])

        def coup_jac(v):
            Jz = fd_jacobian_batched(model.coupling_fn, v[xe])        # (E, n_z, n_x)
            rr = np.arange(E * n_z).reshape(E, n_z)
            r_ = np.concatenate([np.repeat(rr[:, :, None], n_x, 2).ravel(),
                                 E * n_z + np.repeat(rr[:, :, None], n_x, 2).ravel()])
            c_ = np.tile(np.repeat(xe[:, None, :], n_z, axis=1).ravel(), 2)
            v_ = np.concatenate([Jz.ravel(), -Jz.ravel()])
            return r_, c_, v_

        ineq_parts.append((2 * E * n_z,
                           lambda v: np.concatenate([(coup(v) - hi_e).ravel(), (lo_e - coup(v)).ravel()]),
                           coup_jac))

    if model.constraint_fn is not None and model.n_g:
        n_g = model.n_g

        def path_g(v):
            return model.constraint_fn(v[xp], v[ui] + a_e, z_e, w_e).ravel()

        def path_jac(v):
            Z = np.hstack([v[xp], v[ui] + a_e])
            Jg = fd_jacobian_batched(lambda Zb: model.constraint_fn(Zb[:, :n_x], Zb[:, n_x:], z_e, w_e), Z)
            rr = np.arange(E * n_g).reshape(E, n_g)
            r_ = np.repeat(rr[:, :, None], n_x + n_u, 2).ravel()
            c_ = np.concatenate([np.repeat(xp[:, None, :], n_g, 1), np.repeat(ui[:, None, :], n_g, 1)],
                                axis=2).ravel()
            return r_, c_, Jg.ravel()

        ineq_parts.append((E * n_g, path_g, path_jac))

    offsets = np.cumsum([0] + [p[0] for p in ineq_parts])

    def ineq(v):
        return np.concatenate([p[1](v) for p in ineq_parts])

    def ineq_jac(v):
        rs, cs, vs = [], [], []
        for off, part in zip(offsets, ineq_parts):
            r_, c_, v_ = part[2](v)
            rs.append(r_ + off)
            cs.append(c_)
            vs.append(v_)
        return sp.csr_matrix((np.concatenate(vs), (np.concatenate(rs), np.concatenate(cs))),
                             shape=(offsets[-1], n))

    x_lb, x_ub = (model.x_lb, model.x_ub) if x_bounds is None else map(np.asarray, x_bounds)
    lower = np.full(n, -np.inf)
    upper = np.full(n, np.inf)
    lower[n_x:L.u_off] = np.tile(x_lb, tree.n_nodes - 1)
    upper[n_x:L.u_off] = np.tile(x_ub, tree.n_nodes - 1)
    lower[L.u_off:L.pp_off] = np.tile(model.u_lb, inner.size)
    upper[L.u_off:L.pp_off] = np.tile(model.u_ub, inner.size)
    lower[L.pp_off:] = 0.0

    scale = np.ones(n)
    span = np.where(np.isfinite(x_ub - x_lb), x_ub - x_lb, 1.0)
    scale[:L.u_off] = np.tile(np.maximum(0.1 * span, 1e-2), tree.n_nodes)
    uspan = np.where(np.isfinite(model.u_ub - model.u_lb), model.u_ub - model.u_lb, 1.0)
    scale[L.u_off:L.pp_off] = np.tile(np.maximum(0.1 * uspan, 1e-2), inner.size)
    scale[L.pp_off:L.h_off] = 100.0

    nlp = NlpProblem(
        n_vars=n, objective=objective, objective_grad=objective_grad,
        eq_constraints=eq, eq_jacobian=eq_jac, ineq_constraints=ineq, ineq_jacobian=ineq_jac,
        lower=lower, upper=upper, hessian=lambda v, le, li: H_obj, sparse=True, var_scale=scale,
    )
    prob = OcpProblem(nlp, tree, model, L, dt, contract_bounds, np.asarray(x_lb), np.asarray(x_ub))
    prob._cost = cost
    return prob


@dataclass
class OcpSolution:
    states: np.ndarray
    inputs: np.ndarray
    first_input: np.ndarray
    objective: float
    report: SolveReport
    problem: OcpProblem = field(repr=False)

    @property
    def tree(self) -> ScenarioTree:
        return self.problem.tree

    def stage_inputs(self) -> np.ndarray:
        """Inputs along the first scenario, one row per stage."""
        tree = self.tree
        path = tree.path(tree.leaves[0])[:-1]
        pos = np.full(tree.n_nodes, -1)
        pos[tree.inner] = np.arange(tree.inner.size)
        return self.inputs[pos[path]]


def solve_ocp(problem: OcpProblem, warm_start: np.ndarray | None = None, tol_feas: float = 1e-6,
              tol_opt: float = 1e-6, max_iter: int = 50) -> OcpSolution:
    """Solve the tree OCP; ``warm_start`` is a per-stage input guess."""
    v0 = problem.initial_guess(warm_start)
    rep = solve(problem.nlp, v0, tol_feas=tol_feas, tol_opt=tol_opt, max_iter=max_iter,
                trust_radius=10.0, rho0=10.0)
    X, U = problem.unpack(rep.solution)
    return OcpSolution(X, U, U[0].copy(), rep.objective, rep, problem)


def derive_contracts(solution: OcpSolution, model: SubsystemModel, margin: float = CONTRACT_MARGIN,
                     previous: Contract | None = None, nested: bool = False,
                     n_sub: int | None = None) -> Contract:
    """Interval hull of the own coupling over all branches, stage by stage, plus a margin."""
    prob, tree = solution.problem, solution.tree
    edges = np.arange(1, tree.n_nodes)
    par = tree.parent[edges]
    pos = np.full(tree.n_nodes, -1)
    pos[tree.inner] = np.arange(tree.inner.size)
    sub = {} if n_sub is None else {"n_sub": n_sub}
    vals = dense_coupling(model, solution.states[par], solution.inputs[pos[par]] + tree.attack[edges],
                          tree.z_N[edges], tree.w[edges], prob.dt, **sub)
    l_e = tree.stage[edges] - 1
    lo = np.empty((tree.n_stages, model.n_z))
    hi = np.empty_like(lo)
    for l in range(tree.n_stages):
        sel = vals[l_e == l]
        lo[l] = sel.min(axis=0) - margin
        hi[l] = sel.max(axis=0) + margin
    if nested and previous is not None:
        plo, phi = previous.window(tree.start_step, tree.n_stages)
        nlo, nhi = np.maximum(lo, plo), np.minimum(hi, phi)
        ok = nlo <= nhi
        if not np.all(ok):
            log.info("contract of %s cannot be nested at %d stage(s); keeping the new bounds",
                     model.id, int(np.sum(~ok)))
        lo, hi = np.where(ok, nlo, lo), np.where(ok, nhi, hi)
    return Contract(model.id, tree.start_step, lo, hi, prob.dt)


# -- controller ----------------------------------------------------------------

@dataclass
class PlanResult:
    input: np.ndarray
    contract: Contract
    solution: OcpSolution
    fallback: str | None = None


class LocalController:
    """Receding-horizon wrapper around tree building, solving and contract derivation.

    ``use_contract`` adds the own previous contract as a constraint; when the
    constrained problem cannot be solved the controller retries without it.
    """

    def __init__(self, model: SubsystemModel, cost: OcpCost, n_p: int, dt: float = 0.25,
                 robust_horizon: int = 1, use_contract: bool = True,
                 x_bounds: tuple[np.ndarray, np.ndarray] | None = None,
                 margin: float = CONTRACT_MARGIN, nested: bool = False,
                 tol_feas: float = 1e-6, tol_opt: float = 1e-5, max_iter: int = 50,
                 max_leaves: int = MAX_LEAVES) -> None:
        self.model = model
        self.cost = cost
        self.n_p = n_p
        self.dt = dt
        self.robust_horizon = robust_horizon
        self.use_contract = use_contract
        self.x_bounds = x_bounds
        self.margin = margin
        self.nested = nested
        self.tol_feas, self.tol_opt, self.max_iter = tol_feas, tol_opt, max_iter
        self.max_leaves = max_leaves
        self.contract: Contract | None = None
        self._plan: np.ndarray | None = None

    def initial_contract(self, x0, step: int = 0) -> Contract:
        self.contract = Contract.point(self.model.id, step, self.model.coupling_fn(np.asarray(x0, float)),
                                       self.n_p, self.dt)
        return self.contract

    def _shifted(self) -> np.ndarray | None:
        if self._plan is None:
            return None
        return np.vstack([self._plan[1:], self._plan[-1:]])

    def _attempt(self, tree, own, warm):
        prob = assemble_ocp(tree, self.model, self.cost, own, self.dt, self.x_bounds)
        sol = solve_ocp(prob, warm, self.tol_feas, self.tol_opt, self.max_iter)
        rep = sol.report
        usable = rep.converged or (rep.status is Status.MAX_ITER and rep.max_violation <= self.tol_feas)
        return sol, usable

    def plan(self, step: int, x, attack_set, neighbor_contracts: Sequence[Contract],
             components: Sequence[Sequence[int]] | None = None, param_set=None) -> PlanResult:
        tree = build_tree(x, attack_set, neighbor_contracts, param_set, self.n_p, self.robust_horizon,
                          step, components, self.max_leaves, self.model.n_u)
        warm = self._shifted()
        own = self.contract if self.use_contract else None
        fallback = None
        sol, usable = self._attempt(tree, own, warm)
        if not usable and own is not None:
            log.info("%s step %d: contract-constrained OCP %s; retrying without the contract",
                     self.model.id, step, sol.report.status)
            fallback = "contract_relaxed"
            sol, usable = self._attempt(tree, None, warm)
        if not usable:
            log.warning("ControllerFallback %s step %d: OCP %s, applying the shifted previous input",
                        self.model.id, step, sol.report.status)
            fallback = "shifted_input"
            prob = sol.problem
            guess = warm if warm is not None else np.zeros((self.n_p, self.model.n_u))
            X, U = prob.unpack(prob.initial_guess(guess))
            sol = OcpSolution(X, U, U[0].copy(), float(prob.nlp.objective(prob.initial_guess(guess))),
                              sol.report, prob)
        self._plan = sol.stage_inputs()
        contract = derive_contracts(sol, self.model, self.margin, self.contract, self.nested)
        self.contract = contract
        return PlanResult(sol.first_input.copy(), contract, sol, fallback)
