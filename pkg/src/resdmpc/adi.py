"""Attack detection by coupling deviations and identification by sparse optimization.

Detection compares each subsystem's measured coupling with the nominal one it
announced. Identification looks for the l1-smallest attack vector that
explains the measured output up to a tolerance:

* version 1 uses the neighbors' actual couplings (nominal plus deviation);
* version 2 only uses the neighbors' nominal couplings and explains the
  difference through their linearized response to their own attacks and to
  their own incoming coupling deviations.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Callable, Mapping

import numpy as np
import scipy.linalg as sla

from .dynamics import DistributedSystem, SubsystemModel, dense_coupling, integrate_step
from .errors import DerivativeFailure, IdentificationFailed, IntegrationDiverged
from .exchange import DEVIATION, SENSITIVITIES, Bus, Deviation, Sensitivities
from .solver import NlpProblem, Status, fd_jacobian, fd_jacobian_batched, l1_split, solve

log = logging.getLogger(__name__)


@dataclass(frozen=True)
class DetectionConfig:
    tau_d: float = 1e-2
    eps: float = 1e-3
    dt: float = 0.25
    freeze_sensitivity: bool = False
    max_iter: int = 200

    def __post_init__(self) -> None:
        if self.tau_d <= 0 or self.eps < 0 or self.dt <= 0:
            raise ValueError("tau_d and dt must be positive, eps nonnegative")


@dataclass
class Suspicion:
    a_star: np.ndarray
    residual: float
    status: Status
    a_star_neighbors: np.ndarray | None = None
    dz_star: np.ndarray | None = None
    objective: float = 0.0
    iterations: int = 0

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


@dataclass(frozen=True)
class SensitivityBundle:
    """Neighbor response of the received couplings to the neighbors' attacks
    (``s_a``) and to the neighbors' own incoming couplings (``s_z``)."""

    s_a: np.ndarray
    s_z: np.ndarray

    @classmethod
    def from_neighbors(cls, parts: list[tuple[np.ndarray, np.ndarray]]) -> "SensitivityBundle":
        if not parts:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)))
        return cls(sla.block_diag(*[p[0] for p in parts]), sla.block_diag(*[p[1] for p in parts]))


def detect(deviation, cfg: DetectionConfig) -> bool:
    dev = np.asarray(deviation, dtype=float)
    return bool(np.abs(dev).max(initial=0.0) > cfg.tau_d)


# -- identification core ---------------------------------------------------

def _sparse_fit(residual: Callable[[np.ndarray], np.ndarray],
                jacobian: Callable[[np.ndarray], np.ndarray],
                n: int, cfg: DetectionConfig) -> tuple[np.ndarray, float, object]:
    """min ||a||_1 s.t. ||residual(a)||^2 <= eps^2, over split variables."""
    split = l1_split(n)
    M = split.combine_matrix()
    eps_t = cfg.eps * (1.0 - 1e-4)
    cache: dict[bytes, tuple[np.ndarray, np.ndarray]] = {}

    def eval_at(v):
        key = v.tobytes()
        if key not in cache:
            a = M @ v
            cache.clear()
            cache[key] = (residual(a), None)
        return cache[key]

    def jac_at(v):
        r, J = eval_at(v)
        if J is None:
            J = jacobian(M @ v) @ M
            cache[v.tobytes()] = (r, J)
        return r, J

    def ineq(v):
        r = eval_at(v)[0]
        return np.array([r @ r - eps_t ** 2])

    def ineq_jac(v):
        r, J = jac_at(v)
        return (2.0 * r @ J)[None, :]

    def hessian(v, lam_e, lam_i):
        _, J = jac_at(v)
        lam = float(lam_i[0]) if lam_i.size else 0.0
        return 2.0 * max(lam, 0.0) * (J.T @ J)

    prob = NlpProblem(
        n_vars=2 * n, objective=split.cost, objective_grad=lambda v: split.cost_vector(),
        ineq_constraints=ineq, ineq_jacobian=ineq_jac, hessian=hessian,
        lower=split.lower(), upper=split.upper(),
    )
    rep = solve(prob, np.zeros(2 * n), tol_feas=1e-4 * max(cfg.eps, 1e-6) ** 2, tol_opt=1e-7,
                max_iter=cfg.max_iter, trust_radius=1.0)
    if rep.status is Status.INFEASIBLE:
        raise IdentificationFailed(rep.message or "identification problem infeasible")
    a = split.combine(rep.solution)
    res = float(np.linalg.norm(residual(a)))
    return a, res, rep


def _output_residual(model: SubsystemModel, x_k, u_k, y_k1, z_N, dt):
    x_k, u_k, y_k1 = (np.asarray(t, dtype=float) for t in (x_k, u_k, y_k1))

    def residual(a):
        a = np.asarray(a, dtype=float)
        return y_k1 - model.output_fn(integrate_step(model, x_k, u_k + a, z_N, None, dt))

    return residual


def identify_v1(x_k, u_k, y_k1, nominal_N, deviation_N, model: SubsystemModel,
                cfg: DetectionConfig = DetectionConfig()) -> Suspicion:
    z_N = model.stack_neighbors(nominal_N) + model.stack_neighbors(deviation_N) if model.n_zN \
        else np.zeros(0)
    residual = _output_residual(model, x_k, u_k, y_k1, z_N, cfg.dt)

    def jacobian(a):
        return fd_jacobian_batched(residual, np.atleast_2d(a))[0]

    a, res, rep = _sparse_fit(residual, jacobian, model.n_u, cfg)
    return Suspicion(a, res, rep.status, objective=float(np.abs(a).sum()), iterations=rep.iterations)


def local_sensitivity(model: SubsystemModel, x_k, u_k, a_I, nominal_N,
                      cfg: DetectionConfig = DetectionConfig()) -> np.ndarray:
    """d output / d incoming couplings at (x, u + a, nominal couplings)."""
    v = np.asarray(u_k, dtype=float) + np.asarray(a_I, dtype=float)
    z0 = model.stack_neighbors(nominal_N) if model.n_zN else np.zeros(0)
    if z0.size == 0:
        return np.zeros((model.n_y, 0))
    x_k = np.asarray(x_k, dtype=float)

    def out(z):
        return model.output_fn(integrate_step(model, x_k, v, z, None, cfg.dt))

    return fd_jacobian_batched(out, z0[None, :])[0]


def neighbor_sensitivities(model_N: SubsystemModel, x_N, u_N, nominal_NN,
                           cfg: DetectionConfig = DetectionConfig(),
                           rows=None) -> tuple[np.ndarray, np.ndarray]:
    """Jacobians of a neighbor's coupling coefficient w.r.t. its attack and its incoming couplings."""
    x_N = np.asarray(x_N, dtype=float)
    u_N = np.asarray(u_N, dtype=float)
    z0 = model_N.stack_neighbors(nominal_NN) if model_N.n_zN else np.zeros(0)
    sel = slice(None) if rows is None else list(rows)

    def by_attack(a):
        return dense_coupling(model_N, x_N, u_N + a, z0, None, cfg.dt)[..., sel]

    s_a = fd_jacobian_batched(by_attack, np.zeros((1, model_N.n_u)))[0]
    if z0.size:
        def by_coupling(z):
            return dense_coupling(model_N, x_N, u_N, z, None, cfg.dt)[..., sel]
        s_z = fd_jacobian_batched(by_coupling, z0[None, :])[0]
    else:
        s_z = np.zeros((s_a.shape[0], 0))
    return s_a, s_z


def identify_v2(x_k, u_k, y_k1, nominal_N, bundle: SensitivityBundle, model: SubsystemModel,
                cfg: DetectionConfig = DetectionConfig()) -> Suspicion:
    n_u = model.n_u
    n_aN = bundle.s_a.shape[1]
    n_dz = bundle.s_z.shape[1]
    if bundle.s_a.shape[0] != model.n_zN or bundle.s_z.shape[0] != model.n_zN:
        raise ValueError("sensitivity bundle does not match the incoming coupling dimension")
    z_nom = model.stack_neighbors(nominal_N) if model.n_zN else np.zeros(0)
    base = _output_residual(model, x_k, u_k, y_k1, z_nom, cfg.dt)
    frozen = local_sensitivity(model, x_k, u_k, np.zeros(n_u), z_nom, cfg) \
        if cfg.freeze_sensitivity else None
    sens_cache: dict[bytes, np.ndarray] = {}

    def sens(a_I):
        if frozen is not None:
            return frozen
        key = a_I.tobytes()
        if key not in sens_cache:
            sens_cache.clear()
            sens_cache[key] = local_sensitivity(model, x_k, u_k, a_I, z_nom, cfg)
        return sens_cache[key]

    def unpack(w):
        return w[:n_u], w[n_u:n_u + n_aN], w[n_u + n_aN:]

    def residual(w):
        a_I, a_N, dz = unpack(np.asarray(w, dtype=float))
        corr = bundle.s_a @ a_N + bundle.s_z @ dz
        return base(a_I) - sens(a_I) @ corr

    def jacobian(w):
        a_I, a_N, dz = unpack(np.asarray(w, dtype=float))
        corr = bundle.s_a @ a_N + bundle.s_z @ dz
        J_a = fd_jacobian(lambda a: base(a) - sens(a) @ corr, a_I)
        S = sens(a_I)
        return np.hstack([J_a, -S @ bundle.s_a, -S @ bundle.s_z])

    w, res, rep = _sparse_fit(residual, jacobian, n_u + n_aN + n_dz, cfg)
    a_I, a_N, dz = unpack(w)
    return Suspicion(a_I, res, rep.status, a_star_neighbors=a_N, dz_star=dz,
                     objective=float(np.abs(w).sum()), iterations=rep.iterations)


# -- distributed pass --------------------------------------------------------

@dataclass
class AdiSnapshot:
    """Everything one detection/identification round needs; treated as immutable.

    ``nominal_next`` and ``z_next`` are each subsystem's nominal and measured
    coupling coefficients for the step; ``nominal_in`` holds the incoming
    nominal couplings each subsystem used to compute its own nominal.
    """

    system: DistributedSystem
    round: int
    x: Mapping[str, np.ndarray]
    u: Mapping[str, np.ndarray]
    y_next: Mapping[str, np.ndarray]
    z_next: Mapping[str, np.ndarray]
    nominal_next: Mapping[str, np.ndarray]
    nominal_in: Mapping[str, np.ndarray]
    dt: float = 0.25


@dataclass
class AdiResult:
    detected: bool
    suspicions: dict[str, Suspicion]
    flagged: list[str] = field(default_factory=list)


def run_distributed_adi(snapshot: AdiSnapshot, version: int, cfg: DetectionConfig,
                        bus: Bus | None = None, always_identify: bool = False) -> AdiResult:
    if version not in (1, 2):
        raise ValueError("version must be 1 or 2")
    system = snapshot.system
    ids = system.ids
    flagged = [i for i in ids
               if detect(np.asarray(snapshot.z_next[i]) - np.asarray(snapshot.nominal_next[i]), cfg)]
    detected = bool(flagged)
    zeros = {i: Suspicion(np.zeros(system.models[i].n_u), 0.0, Status.CONVERGED) for i in ids}
    if not (detected or always_identify):
        return AdiResult(False, zeros, flagged)

    bus = bus or Bus({i: system.models[i].neighbors for i in ids})
    rnd = snapshot.round
    for i in ids:
        nominal = np.asarray(snapshot.nominal_next[i], dtype=float)
        dev = Deviation(nominal, np.asarray(snapshot.z_next[i], dtype=float) - nominal)
        bus.broadcast(i, rnd, dev)
        if version == 2:
            model = system.models[i]
            per_nb = {}
            for nb in model.neighbors:
                rows = system.route_index(nb, i)
                s_a, s_z = neighbor_sensitivities(model, snapshot.x[i], snapshot.u[i],
                                                  snapshot.nominal_in[i], cfg, rows)
                per_nb[nb] = Sensitivities(s_a, s_z)
            bus.broadcast(i, rnd, per_nb)

    kinds = [DEVIATION] if version == 1 else [DEVIATION, SENSITIVITIES]
    suspicions: dict[str, Suspicion] = {}
    for i in ids:
        model = system.models[i]
        msgs = bus.collect(i, rnd, kinds)
        nominal_N, dev_N, parts = {}, {}, []
        for nb in model.neighbors:
            idx = system.route_index(i, nb)
            by_kind = {m.kind: m.payload for m in msgs if m.sender == nb}
            nominal_N[nb] = by_kind[DEVIATION].nominal[idx]
            dev_N[nb] = by_kind[DEVIATION].deviation[idx]
            if version == 2:
                parts.append((by_kind[SENSITIVITIES].s_a, by_kind[SENSITIVITIES].s_z))
        try:
            if version == 1:
                sus = identify_v1(snapshot.x[i], snapshot.u[i], snapshot.y_next[i], nominal_N, dev_N,
                                  model, cfg)
            else:
                sus = identify_v2(snapshot.x[i], snapshot.u[i], snapshot.y_next[i], nominal_N,
                                  SensitivityBundle.from_neighbors(parts), model, cfg)
        except (IdentificationFailed, DerivativeFailure, IntegrationDiverged) as exc:
            log.warning("identification failed for %s in round %d: %s", i, rnd, exc)
            sus = Suspicion(np.zeros(model.n_u), np.inf, Status.INFEASIBLE)
        suspicions[i] = sus
    bus.close_round(rnd)
    return AdiResult(detected, suspicions, flagged)
