"""Sequential quadratic programming for smooth constrained problems.

Each iteration solves a trust-region QP in elastic (l1-penalty) form, so the
subproblem is always feasible, and accepts steps by the ratio of actual to
predicted reduction of the l1 merit function. A second-order correction is
tried before shrinking the region. Curvature comes from a problem-supplied
Hessian when available, otherwise from a damped BFGS update. If the QP
backend itself breaks down the remaining budget goes to an augmented
Lagrangian loop.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from enum import Enum
from typing import Callable

import numpy as np
import scipy.sparse as sp

from .derivatives import fd_jacobian
from .qp import OPTIMAL, solve_qp_dense, solve_qp_sparse

log = logging.getLogger(__name__)


class Status(str, Enum):
    CONVERGED = "Converged"
    MAX_ITER = "MaxIter"
    INFEASIBLE = "Infeasible"

    def __str__(self) -> str:
        return self.value


@dataclass
class NlpProblem:
    """min f(v) s.t. eq(v) = 0, ineq(v) <= 0, lower <= v <= upper.

    Missing derivative callbacks fall back to central differences. ``hessian``
    receives (v, lam_eq, lam_in) and returns a positive semidefinite
    approximation of the Lagrangian Hessian. ``sparse`` selects the sparse QP
    backend; Jacobians and Hessians may then be scipy sparse matrices.
    """

    n_vars: int
    objective: Callable[[np.ndarray], float]
    eq_constraints: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_constraints: Callable[[np.ndarray], np.ndarray] | None = None
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    objective_grad: Callable[[np.ndarray], np.ndarray] | None = None
    eq_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    ineq_jacobian: Callable[[np.ndarray], np.ndarray] | None = None
    hessian: Callable[..., np.ndarray] | None = None
    sparse: bool = False
    var_scale: np.ndarray | None = None

    def __post_init__(self) -> None:
        self.lower = np.full(self.n_vars, -np.inf) if self.lower is None else np.asarray(self.lower, float)
        self.upper = np.full(self.n_vars, np.inf) if self.upper is None else np.asarray(self.upper, float)
        if self.lower.shape != (self.n_vars,) or self.upper.shape != (self.n_vars,):
            raise ValueError("bounds must have one entry per variable")
        if np.any(self.lower > self.upper):
            raise ValueError("lower bound exceeds upper bound")


@dataclass
class SolveReport:
    solution: np.ndarray
    objective: float
    max_violation: float
    iterations: int
    status: Status
    stationarity: float = np.inf
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_in: np.ndarray = field(default_factory=lambda: np.zeros(0))
    message: str = ""

    @property
    def converged(self) -> bool:
        return self.status is Status.CONVERGED


class _Evaluator:
    def __init__(self, prob: NlpProblem) -> None:
        self.p = prob

    def f(self, v) -> float:
        return float(self.p.objective(v))

    def grad(self, v) -> np.ndarray:
        if self.p.objective_grad is not None:
            return np.asarray(self.p.objective_grad(v), dtype=float)
        return fd_jacobian(lambda z: np.atleast_1d(self.p.objective(z)), v)[0]

    def ce(self, v) -> np.ndarray:
        fn = self.p.eq_constraints
        return np.zeros(0) if fn is None else np.atleast_1d(np.asarray(fn(v), dtype=float))

    def ci(self, v) -> np.ndarray:
        fn = self.p.ineq_constraints
        return np.zeros(0) if fn is None else np.atleast_1d(np.asarray(fn(v), dtype=float))

    def _jac(self, fn, jac, v, m):
        n = self.p.n_vars
        if m == 0:
            return sp.csr_matrix((0, n)) if self.p.sparse else np.zeros((0, n))
        J = jac(v) if jac is not None else fd_jacobian(fn, v)
        if self.p.sparse:
            return sp.csr_matrix(J)
        return np.asarray(J.toarray() if sp.issparse(J) else J, dtype=float).reshape(m, n)

    def je(self, v, m):
        return self._jac(self.p.eq_constraints, self.p.eq_jacobian, v, m)

    def ji(self, v, m):
        return self._jac(self.p.ineq_constraints, self.p.ineq_jacobian, v, m)


def _l1_violation(ce, ci) -> float:
    return float(np.abs(ce).sum() + np.maximum(ci, 0.0).sum())


def _max_violation(ce, ci) -> float:
    return float(max(np.abs(ce).max(initial=0.0), np.maximum(ci, 0.0).max(initial=0.0)))


def _stationarity(g, JE, JI, lam_e, lam_i, v, lb, ub, ci, act_tol: float = 1e-9) -> float:
    gl = g.copy()
    if lam_e.size:
        gl += JE.T @ lam_e
    if lam_i.size:
        gl += JI.T @ lam_i
    gl = np.asarray(gl).ravel()
    # bounds within act_tol count as active (interior-point QPs stop just inside)
    tol = act_tol * np.maximum(1.0, np.abs(v))
    r = gl.copy()
    at_lo = v <= lb + tol
    at_hi = v >= ub - tol
    r[at_lo] = np.minimum(gl[at_lo], 0.0)
    r[at_hi] = np.maximum(gl[at_hi], 0.0)
    r[at_lo & at_hi] = 0.0
    comp = np.abs(lam_i * np.minimum(ci, 0.0)).max(initial=0.0) if lam_i.size else 0.0
    return float(max(np.abs(r).max(initial=0.0), comp))


def _snap(v, lb, ub):
    v = np.clip(v, lb, ub)
    tol = 1e-9 * np.maximum(1.0, np.abs(v))
    lo = np.isfinite(lb) & (np.abs(v - lb) <= tol)
    hi = np.isfinite(ub) & (np.abs(v - ub) <= tol)
    v[lo] = lb[lo]
    v[hi] = ub[hi]
    return v


def _stack(blocks, sparse):
    if sparse:
        return sp.bmat(blocks, format="csr")
    return np.block([[b.toarray() if sp.issparse(b) else b for b in row] for row in blocks])


def _zeros(m, n, sparse):
    return sp.csr_matrix((m, n)) if sparse else np.zeros((m, n))


def _eye(m, sparse):
    return sp.identity(m, format="csr") if sparse else np.eye(m)


def _elastic_qp(H, g, ce, ci, JE, JI, dlo, dhi, rho, sparse):
    """Penalty QP in (d, p, q, r): always feasible."""
    n, me, mi = g.size, ce.size, ci.size
    Hb = _stack([[H, _zeros(n, 2 * me + mi, sparse)],
                 [_zeros(2 * me + mi, n, sparse), _zeros(2 * me + mi, 2 * me + mi, sparse)]], sparse) \
        if (me + mi) else H
    c = np.concatenate([g, np.full(2 * me + mi, rho)])
    A_eq = _stack([[JE, -_eye(me, sparse), _eye(me, sparse), _zeros(me, mi, sparse)]], sparse) if me else None
    G = _stack([[JI, _zeros(mi, 2 * me, sparse), -_eye(mi, sparse)]], sparse) if mi else None
    lb = np.concatenate([dlo, np.zeros(2 * me + mi)])
    ub = np.concatenate([dhi, np.full(2 * me + mi, np.inf)])
    if sparse:
        res = solve_qp_sparse(Hb, c, A_eq, -ce if me else None, G, -ci if mi else None, lb, ub)
    else:
        x0 = np.concatenate([np.clip(np.zeros(n), dlo, dhi), np.maximum(ce, 0), np.maximum(-ce, 0),
                             np.maximum(ci, 0)])
        # the start must satisfy the elastic rows at d = clip(0)
        d0 = x0[:n]
        res_e = ce + (JE @ d0 if me else 0.0)
        x0[n:n + me] = np.maximum(res_e, 0)
        x0[n + me:n + 2 * me] = np.maximum(-res_e, 0)
        x0[n + 2 * me:] = np.maximum(ci + (JI @ d0 if mi else 0.0), 0)
        res = solve_qp_dense(Hb, c, A_eq, -ce if me else None, G, -ci if mi else None, lb, ub, x0=x0)
    return res


def _plain_qp(H, g, ce, ci, JE, JI, dlo, dhi):
    me, mi = ce.size, ci.size
    return solve_qp_sparse(H, g, JE if me else None, -ce if me else None,
                           JI if mi else None, -ci if mi else None, dlo, dhi)


def solve(problem: NlpProblem, v0, tol_feas: float = 1e-6, tol_opt: float = 1e-6,
          max_iter: int = 200, trust_radius: float = 1.0, rho0: float = 1.0) -> SolveReport:
    ev = _Evaluator(problem)
    lb, ub = problem.lower, problem.upper
    n = problem.n_vars
    scale = np.ones(n) if problem.var_scale is None else np.asarray(problem.var_scale, float)
    sparse = problem.sparse
    v = _snap(np.asarray(v0, dtype=float).copy(), lb, ub)

    f, g = ev.f(v), ev.grad(v)
    ce, ci = ev.ce(v), ev.ci(v)
    JE, JI = ev.je(v, ce.size), ev.ji(v, ci.size)
    lam_e, lam_i = np.zeros(ce.size), np.zeros(ci.size)
    B = np.eye(n) if problem.hessian is None else None
    rho, rho_max = rho0, 1e12
    delta, delta_max = trust_radius, 1e6 * max(1.0, trust_radius)
    stat = np.inf
    status = Status.MAX_ITER
    message = ""
    it = 0

    def merit(fv, cev, civ):
        return fv + rho * _l1_violation(cev, civ)

    for it in range(1, max_iter + 1):
        viol = _max_violation(ce, ci)
        gscale = max(1.0, np.abs(g).max(initial=0.0))
        if it > 1:
            stat = _stationarity(g, JE, JI, lam_e, lam_i, v, lb, ub, ci, tol_feas)
            if viol <= tol_feas and stat <= tol_opt * gscale:
                status = Status.CONVERGED
                break
        H = problem.hessian(v, lam_e, lam_i) if problem.hessian is not None else B
        if sparse:
            H = sp.csr_matrix(H)
        dlo = np.maximum(lb - v, -delta * scale)
        dhi = np.minimum(ub - v, delta * scale)

        def subproblem(ce_k, ci_k, rho_k):
            if sparse:
                res = _plain_qp(H, g, ce_k, ci_k, JE, JI, dlo, dhi)
                if res.ok:
                    return res, False
            return _elastic_qp(H, g, ce_k, ci_k, JE, JI, dlo, dhi, rho_k, sparse), True

        res, elastic = subproblem(ce, ci, rho)
        if not res.ok:
            message = f"QP backend returned {res.status}; switching to augmented Lagrangian"
            log.debug(message)
            return _augmented_lagrangian(problem, ev, v, tol_feas, tol_opt, max_iter - it, it, message)
        d = res.x[:n]

        def lin_violation(step):
            le = ce + (JE @ step if ce.size else 0.0)
            li = ci + (JI @ step if ci.size else 0.0)
            return _l1_violation(np.atleast_1d(le), np.atleast_1d(li))

        v1 = _l1_violation(ce, ci)
        lin = lin_violation(d)
        # steer the penalty while it buys linearized feasibility
        # (a level that buys nothing is skipped, not a reason to stop)
        rho_try = rho
        while elastic and lin > 1e-10 * (1.0 + v1) and rho_try < rho_max:
            rho_try *= 10.0
            trial, _ = subproblem(ce, ci, rho_try)
            if not trial.ok:
                break
            lin_t = lin_violation(trial.x[:n])
            if lin_t < 0.9 * lin:
                rho = rho_try
                res, d, lin = trial, trial.x[:n], lin_t
        lam_e_new = res.lam_eq[:ce.size] if ce.size else np.zeros(0)
        lam_i_new = res.lam_in[:ci.size] if ci.size else np.zeros(0)
        lam_max = max(np.abs(lam_e_new).max(initial=0.0), np.abs(lam_i_new).max(initial=0.0))
        if rho < 1.1 * lam_max:
            rho = min(rho_max, max(2.0 * lam_max, 10.0 * rho))

        quad = float(g @ d + 0.5 * d @ (H @ d))
        pred = -quad + rho * (v1 - lin)
        dnorm = float(np.abs(d / scale).max(initial=0.0))
        if dnorm <= 1e-14 * (1.0 + np.abs(v / scale).max(initial=0.0)) or pred <= 1e-15 * (1.0 + abs(f)):
            lam_e, lam_i = lam_e_new, lam_i_new
            stat = _stationarity(g, JE, JI, lam_e, lam_i, v, lb, ub, ci, tol_feas)
            if viol <= tol_feas:
                status = Status.CONVERGED if stat <= max(tol_opt * gscale, 1e-9) else Status.MAX_ITER
                message = "" if status is Status.CONVERGED else "no further progress possible"
            else:
                status = Status.INFEASIBLE
                message = "linearized constraints cannot be satisfied"
            break

        phi = merit(f, ce, ci)
        v_t = _snap(v + d, lb, ub)
        f_t, ce_t, ci_t = ev.f(v_t), ev.ce(v_t), ev.ci(v_t)
        ratio = (phi - merit(f_t, ce_t, ci_t)) / pred
        if ratio < 0.1 and _l1_violation(ce_t, ci_t) > v1:
            # second-order correction against constraint curvature
            ce_s = ce_t - (JE @ d if ce.size else 0.0)
            ci_s = ci_t - (JI @ d if ci.size else 0.0)
            res_s, _ = subproblem(np.atleast_1d(ce_s), np.atleast_1d(ci_s), rho)
            if res_s.ok:
                v_s = _snap(v + res_s.x[:n], lb, ub)
                f_s, ce_ss, ci_ss = ev.f(v_s), ev.ce(v_s), ev.ci(v_s)
                ratio_s = (phi - merit(f_s, ce_ss, ci_ss)) / pred
                if ratio_s >= 0.1:
                    v_t, f_t, ce_t, ci_t, ratio = v_s, f_s, ce_ss, ci_ss, ratio_s
        if ratio < 0.1:
            delta = 0.25 * dnorm
            if delta < 1e-14:
                status = Status.CONVERGED if viol <= tol_feas and stat <= tol_opt * gscale else Status.MAX_ITER
                message = "trust region collapsed"
                break
            continue

        if ratio > 0.75 and dnorm >= 0.99 * delta:
            delta = min(2.0 * delta, delta_max)
        g_t = ev.grad(v_t)
        JE_t, JI_t = ev.je(v_t, ce_t.size), ev.ji(v_t, ci_t.size)
        if B is not None:
            s_k = v_t - v
            y_k = (g_t + (JE_t.T @ lam_e_new if ce.size else 0) + (JI_t.T @ lam_i_new if ci.size else 0)) \
                - (g + (JE.T @ lam_e_new if ce.size else 0) + (JI.T @ lam_i_new if ci.size else 0))
            B = _damped_bfgs(B, s_k, np.asarray(y_k).ravel())
        v, f, g, ce, ci, JE, JI = v_t, f_t, g_t, ce_t, ci_t, JE_t, JI_t
        lam_e, lam_i = lam_e_new, lam_i_new
    else:
        stat = _stationarity(g, JE, JI, lam_e, lam_i, v, lb, ub, ci, tol_feas)
        viol = _max_violation(ce, ci)
        if viol <= tol_feas and stat <= tol_opt * max(1.0, np.abs(g).max(initial=0.0)):
            status = Status.CONVERGED

    return SolveReport(v, f, _max_violation(ce, ci), it, status, stat, lam_e, lam_i, message)


def _damped_bfgs(B, s, y):
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-300:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    return B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy


def _augmented_lagrangian(problem, ev, v, tol_feas, tol_opt, budget, it0, message) -> SolveReport:
    from scipy.optimize import minimize

    lb, ub = problem.lower, problem.upper
    ce, ci = ev.ce(v), ev.ci(v)
    lam_e, lam_i = np.zeros(ce.size), np.zeros(ci.size)
    mu = 10.0
    bounds = list(zip(np.where(np.isfinite(lb), lb, None), np.where(np.isfinite(ub), ub, None)))
    it = it0
    for _ in range(max(1, budget)):
        it += 1

        def fun(z):
            cez, ciz = ev.ce(z), ev.ci(z)
            shifted = np.maximum(0.0, lam_i + mu * ciz)
            val = ev.f(z) + lam_e @ cez + 0.5 * mu * cez @ cez + (shifted @ shifted - lam_i @ lam_i) / (2 * mu)
            grad = ev.grad(z)
            if cez.size:
                grad = grad + np.asarray(ev.je(z, cez.size).T @ (lam_e + mu * cez)).ravel()
            if ciz.size:
                grad = grad + np.asarray(ev.ji(z, ciz.size).T @ shifted).ravel()
            return val, grad

        v = minimize(fun, v, jac=True, method="L-BFGS-B", bounds=bounds,
                     options={"maxiter": 500, "gtol": 1e-10, "ftol": 1e-15}).x
        ce, ci = ev.ce(v), ev.ci(v)
        lam_e = lam_e + mu * ce
        lam_i = np.maximum(0.0, lam_i + mu * ci)
        if _max_violation(ce, ci) <= tol_feas:
            g = ev.grad(v)
            JE, JI = ev.je(v, ce.size), ev.ji(v, ci.size)
            stat = _stationarity(g, JE, JI, lam_e, lam_i, v, lb, ub, ci, tol_feas)
            if stat <= tol_opt * max(1.0, np.abs(g).max(initial=0.0)):
                return SolveReport(v, ev.f(v), _max_violation(ce, ci), it, Status.CONVERGED, stat,
                                   lam_e, lam_i, message)
        else:
            mu *= 10.0
    return SolveReport(v, ev.f(v), _max_violation(ce, ci), it, Status.MAX_ITER, np.inf, lam_e, lam_i,
                       message)
