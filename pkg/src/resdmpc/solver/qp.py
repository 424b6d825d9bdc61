"""Convex quadratic subproblem solvers.

``solve_qp_dense`` is a primal active-set method working in the null space
of the active constraints; it handles singular (positive semidefinite)
Hessians by following zero-curvature descent rays to the next blocking
constraint. ``solve_qp_sparse`` hands large sparse problems to Clarabel.

Both solve

    min 1/2 x'Hx + c'x  s.t.  A_eq x = b_eq,  G x <= h,  lb <= x <= ub

and return multipliers with H x + c + A_eq' l_eq + G' l_in - l_lb + l_ub = 0.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg as sla
import scipy.sparse as sp

OPTIMAL = "optimal"
INFEASIBLE = "infeasible"
UNBOUNDED = "unbounded"
MAX_ITER = "max_iter"
FAILED = "failed"


@dataclass
class QpResult:
    x: np.ndarray
    lam_eq: np.ndarray
    lam_in: np.ndarray
    lam_lb: np.ndarray
    lam_ub: np.ndarray
    status: str
    iterations: int = 0

    @property
    def ok(self) -> bool:
        return self.status == OPTIMAL


def _as_rows(A, n: int) -> np.ndarray:
    if A is None:
        return np.zeros((0, n))
    A = A.toarray() if sp.issparse(A) else np.asarray(A, dtype=float)
    return A.reshape(-1, n)


def _phase_one(A_eq, b_eq, G, h) -> np.ndarray | None:
    from scipy.optimize import linprog

    n = A_eq.shape[1]
    res = linprog(np.zeros(n), A_ub=G if G.size else None, b_ub=h if G.size else None,
                  A_eq=A_eq if A_eq.size else None, b_eq=b_eq if A_eq.size else None,
                  bounds=[(None, None)] * n, method="highs")
    return res.x if res.status == 0 else None


def solve_qp_dense(H, c, A_eq=None, b_eq=None, G=None, h=None, lb=None, ub=None,
                   x0=None, max_iter: int | None = None) -> QpResult:
    c = np.asarray(c, dtype=float)
    n = c.size
    H = np.asarray(H.toarray() if sp.issparse(H) else H, dtype=float).reshape(n, n)
    H = 0.5 * (H + H.T)
    A_eq = _as_rows(A_eq, n)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    G0 = _as_rows(G, n)
    h0 = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub):
        return _empty(n, A_eq, G0, INFEASIBLE)

    # fold bounds into the inequality rows
    il = np.flatnonzero(np.isfinite(lb))
    iu = np.flatnonzero(np.isfinite(ub))
    eye = np.eye(n)
    Gall = np.vstack([G0, -eye[il], eye[iu]])
    hall = np.concatenate([h0, -lb[il], ub[iu]])
    m_in, m_all = G0.shape[0], Gall.shape[0]

    scale = max(1.0, np.abs(hall).max(initial=0.0), np.abs(b_eq).max(initial=0.0))
    feas_tol = 1e-9 * scale

    def feasible(x):
        ok_in = np.all(Gall @ x - hall <= feas_tol) if m_all else True
        ok_eq = np.all(np.abs(A_eq @ x - b_eq) <= feas_tol) if A_eq.size else True
        return ok_in and ok_eq

    x = None if x0 is None else np.asarray(x0, dtype=float).copy()
    if x is None or not feasible(x):
        x = _phase_one(A_eq, b_eq, Gall, hall)
        if x is None:
            return _empty(n, A_eq, G0, INFEASIBLE)

    working: list[int] = []
    rank = np.linalg.matrix_rank(A_eq) if A_eq.size else 0
    if m_all:
        active = np.flatnonzero(Gall @ x - hall >= -1e-14 * scale)
        for i in active:
            trial = np.vstack([A_eq, Gall[working + [i]]])
            r = np.linalg.matrix_rank(trial)
            if r > rank:
                working.append(int(i))
                rank = r

    max_iter = max_iter or 50 * (n + m_all + 10)
    status = MAX_ITER
    lam_w = np.zeros(0)
    it = 0
    for it in range(1, max_iter + 1):
        g = H @ x + c
        A_w = np.vstack([A_eq, Gall[working]])
        Z = sla.null_space(A_w) if A_w.shape[0] else np.eye(n)
        gscale = max(1.0, np.abs(g).max())
        p = np.zeros(n)
        ray = False
        if Z.shape[1]:
            Hr = Z.T @ H @ Z
            evals, Q = np.linalg.eigh(0.5 * (Hr + Hr.T))
            pos = evals > 1e-10 * max(1.0, np.abs(evals).max())
            gq = Q.T @ (Z.T @ g)
            flat = ~pos
            if np.any(np.abs(gq[flat]) > 1e-11 * gscale):
                p = -Z @ (Q[:, flat] @ gq[flat])
                ray = True
            else:
                p = -Z @ (Q[:, pos] @ (gq[pos] / evals[pos]))
        if not ray and np.abs(p).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(x).max()):
            if A_w.shape[0]:
                lam_w = np.linalg.lstsq(A_w.T, -g, rcond=None)[0]
            else:
                lam_w = np.zeros(0)
            lam_ineq = lam_w[A_eq.shape[0]:]
            if lam_ineq.size == 0 or lam_ineq.min() >= -1e-9 * gscale:
                status = OPTIMAL
                break
            # drop the most negative multiplier; lowest index on ties
            worst = lam_ineq.min()
            cands = [working[j] for j in np.flatnonzero(lam_ineq <= worst + 1e-14 * gscale)]
            working.remove(min(cands))
            continue
        # ratio test against constraints outside the working set
        alpha = np.inf if ray else 1.0
        block = -1
        if m_all:
            Gp = Gall @ p
            slack = hall - Gall @ x
            mask = Gp > 1e-14 * max(1.0, np.abs(p).max())
            mask[working] = False
            if np.any(mask):
                cand = np.flatnonzero(mask)
                ratios = np.maximum(slack[cand], 0.0) / Gp[cand]
                best = ratios.min()
                if best <= alpha:
                    alpha = best
                    block = int(cand[np.flatnonzero(ratios <= best * (1 + 1e-12) + 1e-300)].min())
        if not np.isfinite(alpha):
            status = UNBOUNDED
            break
        x = x + alpha * p
        if block >= 0:
            working.append(block)

    lam_all = np.zeros(m_all)
    lam_eq = np.zeros(A_eq.shape[0])
    if lam_w.size:
        lam_eq = lam_w[:A_eq.shape[0]].copy()
        lam_all[working] = np.maximum(lam_w[A_eq.shape[0]:], 0.0)
    lam_lb = np.zeros(n)
    lam_ub = np.zeros(n)
    lam_lb[il] = lam_all[m_in:m_in + il.size]
    lam_ub[iu] = lam_all[m_in + il.size:]
    # land exactly on active bounds
    for i in working:
        if i >= m_in + il.size:
            x[iu[i - m_in - il.size]] = ub[iu[i - m_in - il.size]]
        elif i >= m_in:
            x[il[i - m_in]] = lb[il[i - m_in]]
    return QpResult(x, lam_eq, lam_all[:m_in], lam_lb, lam_ub, status, it)


def _empty(n, A_eq, G, status) -> QpResult:
    return QpResult(np.full(n, np.nan), np.zeros(A_eq.shape[0]), np.zeros(G.shape[0]),
                    np.zeros(n), np.zeros(n), status, 0)


def solve_qp_sparse(H, c, A_eq=None, b_eq=None, G=None, h=None, lb=None, ub=None,
                    tol: float = 1e-9, max_iter: int = 200) -> QpResult:
    import clarabel

    c = np.asarray(c, dtype=float)
    n = c.size
    H = sp.csc_matrix(H, shape=(n, n))
    A_eq = sp.csr_matrix((0, n)) if A_eq is None else sp.csr_matrix(A_eq)
    G = sp.csr_matrix((0, n)) if G is None else sp.csr_matrix(G)
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, dtype=float)
    h = np.zeros(0) if h is None else np.asarray(h, dtype=float)
    lb = np.full(n, -np.inf) if lb is None else np.asarray(lb, dtype=float)
    ub = np.full(n, np.inf) if ub is None else np.asarray(ub, dtype=float)
    if np.any(lb > ub):
        return _empty(n, A_eq, G, INFEASIBLE)
    il = np.flatnonzero(np.isfinite(lb))
    iu = np.flatnonzero(np.isfinite(ub))
    eye = sp.identity(n, format="csr")
    A = sp.vstack([A_eq, G, -eye[il], eye[iu]], format="csc")
    b = np.concatenate([b_eq, h, -lb[il], ub[iu]])
    cones = []
    if A_eq.shape[0]:
        cones.append(clarabel.ZeroConeT(A_eq.shape[0]))
    m_ineq = G.shape[0] + il.size + iu.size
    if m_ineq:
        cones.append(clarabel.NonnegativeConeT(m_ineq))
    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.max_iter = max_iter
    settings.tol_gap_abs = tol
    settings.tol_gap_rel = tol
    settings.tol_feas = tol
    sol = clarabel.DefaultSolver(sp.triu(H, format="csc"), c, A, b, cones, settings).solve()
    name = str(sol.status)
    if name in ("Solved", "AlmostSolved"):
        status = OPTIMAL
    elif "PrimalInfeasible" in name:
        status = INFEASIBLE
    elif "DualInfeasible" in name:
        status = UNBOUNDED
    elif name == "MaxIterations":
        status = MAX_ITER
    else:
        status = FAILED
    x = np.asarray(sol.x, dtype=float)
    z = np.asarray(sol.z, dtype=float)
    me, mi = A_eq.shape[0], G.shape[0]
    lam_lb = np.zeros(n)
    lam_ub = np.zeros(n)
    lam_lb[il] = z[me + mi:me + mi + il.size]
    lam_ub[iu] = z[me + mi + il.size:]
    return QpResult(x, z[:me].copy(), z[me:me + mi].copy(), lam_lb, lam_ub, status,
                    int(sol.iterations))
