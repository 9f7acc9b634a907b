"""Line-search SQP with an L1 exact-penalty merit function.

Equality constraints are eliminated in each subproblem with a rank-revealing
QR factorization (null-space method), so redundant or overdetermined
linearizations degrade to a least-squares step instead of failing. The
remaining inequality QP is solved by the dual active-set method in ``qp``.
"""

import json
import logging
import time

import numpy as np
from scipy.linalg import qr, solve_triangular

from .problem import (INFEASIBLE, ITER_LIMIT, NUMERIC_FAIL, OPTIMAL, NlpSolution,
                      NumericFail, SolverOptions)
from .qp import QPInfeasible, QPIterationLimit, solve_qp

log = logging.getLogger(__name__)

_ARMIJO = 1e-4
_MIN_STEP = 1e-8
_SCALE_MAX = 100.0


class _Point:
    """All function information at one iterate."""

    __slots__ = ("z", "f", "g", "ce", "je", "ci", "ji")

    def __init__(self, problem, z):
        self.z = z
        self.f = float(problem.objective(z))
        self.g = np.asarray(problem.gradient(z), float).ravel()
        self.ce = problem.c_eq(z)
        self.je = problem.j_eq(z)
        self.ci = problem.c_ineq(z)
        self.ji = problem.j_ineq(z)
        if not (np.isfinite(self.f) and np.all(np.isfinite(self.g))
                and np.all(np.isfinite(self.ce)) and np.all(np.isfinite(self.ci))
                and np.all(np.isfinite(self.je)) and np.all(np.isfinite(self.ji))):
            raise NumericFail("non-finite function value")

    def violation_l1(self):
        return np.abs(self.ce).sum() + np.maximum(self.ci, 0.0).sum()

    def violation_inf(self):
        return max(np.abs(self.ce).max(initial=0.0), np.maximum(self.ci, 0.0).max(initial=0.0))


def _values(problem, z):
    """Objective and constraint values only (line-search trial points)."""
    f = float(problem.objective(z))
    ce = problem.c_eq(z)
    ci = problem.c_ineq(z)
    if not (np.isfinite(f) and np.all(np.isfinite(ce)) and np.all(np.isfinite(ci))):
        return np.inf, ce, ci
    return f, ce, ci


def _bound_rows(z, lb, ub):
    """Finite bounds as rows of ``S p <= h``."""
    iu = np.flatnonzero(np.isfinite(ub))
    il = np.flatnonzero(np.isfinite(lb))
    return iu, il, np.concatenate([ub[iu] - z[iu], z[il] - lb[il]])


class _EqFactor:
    """Rank-revealing factorization of the equality Jacobian."""

    def __init__(self, je, n):
        self.m = je.shape[0]
        if self.m == 0:
            self.r = 0
            self.Y = np.zeros((n, 0))
            self.Z = np.eye(n)
            return
        Q, R, piv = qr(je.T, mode="full", pivoting=True)
        diag = np.abs(np.diag(R))
        tol = max(diag[0], 1.0) * 1e-10 if diag.size else 0.0
        r = int(np.sum(diag > tol))
        self.r = r
        self.Y = Q[:, :r]
        self.Z = Q[:, r:]
        self.R11 = R[:r, :r]
        self.piv = piv

    def particular(self, ce):
        """Basic solution of ``J p = -ce`` using the independent rows."""
        if self.r == 0:
            return np.zeros(self.Y.shape[0])
        w = solve_triangular(self.R11.T, -ce[self.piv[:self.r]], lower=True)
        return self.Y @ w

    def multipliers(self, w):
        """Least-squares ``lam`` with ``J' lam = -w``."""
        lam = np.zeros(self.m)
        if self.r:
            lam[self.piv[:self.r]] = solve_triangular(self.R11, -(self.Y.T @ w))
        return lam


def _damped_bfgs(B, s, y):
    Bs = B @ s
    sBs = s @ Bs
    if sBs <= 1e-16 * max(1.0, s @ s):
        return B
    sy = s @ y
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = s @ y
    return B + np.outer(y, y) / sy - np.outer(Bs, Bs) / sBs


class _Hessian:
    def __init__(self, problem, opts, z, B0):
        self.problem = problem
        self.opts = opts
        self.mode = opts.hessian
        if self.mode == "gauss-newton" and problem.residual_jac is None:
            self.mode = "bfgs"
        if self.mode == "exact" and problem.lagrangian_hessian is None:
            self.mode = "bfgs"
        n = problem.n
        self.blocks = problem.hessian_blocks or [np.arange(n)]
        self.B = np.array(B0, float) if B0 is not None else self._initial(z)

    def _initial(self, z):
        n = self.problem.n
        if self.problem.residual_jac is not None:
            Jr = np.asarray(self.problem.residual_jac(z), float).reshape(-1, n)
            return 2.0 * Jr.T @ Jr + self.opts.hessian_init_reg * np.eye(n)
        return np.eye(n)

    def reset(self, z):
        self.B = self._initial(z)

    @property
    def indefinite(self):
        return self.mode == "exact"

    def matrix(self, z, lam_eq=None, lam_in=None):
        if self.mode == "exact":
            n = self.problem.n
            le = np.zeros(0) if lam_eq is None else lam_eq
            li = np.zeros(0) if lam_in is None else lam_in
            self.B = np.asarray(self.problem.lagrangian_hessian(z, le, li), float).reshape(n, n)
            return self.B
        if self.mode == "gauss-newton":
            Jr = np.asarray(self.problem.residual_jac(z), float).reshape(-1, self.problem.n)
            return 2.0 * Jr.T @ Jr + self.opts.hessian_init_reg * np.eye(self.problem.n)
        return self.B

    def update(self, s, y):
        if self.mode != "bfgs":
            return
        for idx in self.blocks:
            sb, yb = s[idx], y[idx]
            if not np.any(sb):
                continue
            sub = self.B[np.ix_(idx, idx)]
            self.B[np.ix_(idx, idx)] = _damped_bfgs(sub, sb, yb)


def _qp_step(B, pt, lb, ub, reg, convexify=False):
    """Solve the SQP subproblem. Returns (p, lam_eq, lam_in, nu)."""
    n = pt.z.size
    fac = _EqFactor(pt.je, n)
    pY = fac.particular(pt.ce)
    Z = fac.Z
    iu, il, hb = _bound_rows(pt.z, lb, ub)
    A_in = np.vstack([pt.ji @ Z, Z[iu], -Z[il]])
    b_in = np.concatenate([-pt.ci - pt.ji @ pY, hb[:iu.size] - pY[iu], hb[iu.size:] + pY[il]])
    k = Z.shape[1]
    # rows the equalities already determine carry no direction in the null space;
    # keep them out of the QP so they cannot produce spurious multipliers
    full = np.concatenate([np.linalg.norm(pt.ji, axis=1), np.ones(iu.size + il.size)])
    reduced = np.linalg.norm(A_in, axis=1) if k else np.zeros(b_in.size)
    live = reduced > 1e-9 * np.maximum(full, 1e-300)
    if np.any(b_in[~live] < -1e-9):
        raise QPInfeasible("inequality contradicts the linearized equalities")
    lam_rows = np.zeros(b_in.size)
    if k == 0:
        y = np.zeros(0)
    else:
        Hr = Z.T @ B @ Z
        Hr = 0.5 * (Hr + Hr.T)
        if convexify:
            Hr = _convexify(Hr)
        Hr = Hr + reg * np.eye(k)
        gr = Z.T @ (pt.g + B @ pY)
        res = solve_qp(Hr, gr, A_in=A_in[live], b_in=b_in[live])
        y = res.x
        lam_rows[live] = res.lam_in
    p = pY + Z @ y
    m_i = pt.ci.size
    lam_in = lam_rows[:m_i]
    nu = np.zeros(n)
    nu[iu] += lam_rows[m_i:m_i + iu.size]
    nu[il] -= lam_rows[m_i + iu.size:]
    w = pt.g + B @ p + reg * p + pt.ji.T @ lam_in + nu
    lam_eq = fac.multipliers(w)
    return p, lam_eq, lam_in, nu, fac


def _convexify(H):
    """Positive definite modification of a symmetric matrix (eigenvalue mirroring)."""
    w, V = np.linalg.eigh(H)
    if w[0] > 1e-8 * max(1.0, w[-1]):
        return H
    floor = 1e-8 * max(1.0, np.abs(w).max())
    w = np.maximum(np.abs(w), floor)
    return (V * w) @ V.T


def _kkt(pt, lam_eq, lam_in, nu, lb, ub):
    grad_l = pt.g + pt.je.T @ lam_eq + pt.ji.T @ lam_in + nu
    mult_l1 = np.abs(lam_eq).sum() + np.abs(lam_in).sum() + np.abs(nu).sum()
    m_total = lam_eq.size + lam_in.size + np.count_nonzero(nu)
    s_d = max(_SCALE_MAX, mult_l1 / max(m_total, 1)) / _SCALE_MAX
    stat = np.abs(grad_l).max(initial=0.0) / s_d
    bviol = max(np.maximum(lb - pt.z, 0).max(initial=0.0), np.maximum(pt.z - ub, 0).max(initial=0.0))
    feas = max(pt.violation_inf(), bviol)
    comp = np.abs(lam_in * pt.ci).max(initial=0.0)
    up, lo = nu > 0, nu < 0
    comp = max(comp, np.abs(nu[up] * (ub[up] - pt.z[up])).max(initial=0.0),
               np.abs(nu[lo] * (pt.z[lo] - lb[lo])).max(initial=0.0))
    comp = max(comp, -lam_in.min(initial=0.0))
    return stat, feas, comp


def restore_feasibility(problem, z, opts):
    """Levenberg-Marquardt minimization of the squared constraint violation.

    Returns the final point and its infinity-norm violation.
    """
    lb, ub = problem.lb, problem.ub
    lm = 1e-4

    def resid(zz):
        ce, ci = problem.c_eq(zz), problem.c_ineq(zz)
        act = ci > 0
        v = np.concatenate([ce, ci[act]])
        return v, act

    v, act = resid(z)
    phi = 0.5 * v @ v
    for _ in range(opts.max_restoration_iter):
        vinf = np.abs(v).max(initial=0.0)
        if vinf <= 0.1 * opts.tol_feas:
            break
        J = np.vstack([problem.j_eq(z), problem.j_ineq(z)[act]])
        grad = J.T @ v
        if np.abs(grad).max(initial=0.0) <= 1e-12 * max(1.0, vinf):
            break
        JtJ = J.T @ J
        improved = False
        while lm <= 1e8:
            p = -np.linalg.solve(JtJ + lm * np.eye(z.size), grad)
            z_new = np.clip(z + p, lb, ub)
            v_new, act_new = resid(z_new)
            if np.all(np.isfinite(v_new)) and 0.5 * v_new @ v_new < phi:
                z, v, act = z_new, v_new, act_new
                phi = 0.5 * v @ v
                lm = max(lm / 10.0, 1e-12)
                improved = True
                break
            lm *= 10.0
        if not improved:
            break
    return z, np.abs(v).max(initial=0.0)


def solve(problem, z0, options=None, hessian0=None):
    """Minimize an :class:`NlpProblem` starting from ``z0``.

    Parameters
    ----------
    problem : NlpProblem
    z0 : array
        Initial guess; projected onto the bounds.
    options : SolverOptions, optional
    hessian0 : (n, n) array, optional
        Initial quasi-Newton matrix (warm start).

    Returns
    -------
    NlpSolution
    """
    opts = options or SolverOptions()
    t_start = time.perf_counter()
    z = np.clip(np.asarray(z0, float).copy(), problem.lb, problem.ub)
    merit_hist = []
    try:
        hess, pt, status, it, stat, feas, comp, lam_eq, lam_in = _solve(
            problem, z, opts, hessian0, merit_hist)
    except NumericFail as exc:
        log.debug(json.dumps({"event": "nlp_solve", "status": NUMERIC_FAIL, "reason": str(exc)}))
        return NlpSolution(z=z, objective=np.nan, status=NUMERIC_FAIL, stationarity=np.inf,
                           feasibility=np.inf, complementarity=np.inf, iterations=0,
                           wall_time=time.perf_counter() - t_start)
    sol = NlpSolution(z=pt.z.copy(), objective=pt.f, status=status,
                      stationarity=float(stat), feasibility=float(feas),
                      complementarity=float(comp), iterations=it,
                      wall_time=time.perf_counter() - t_start,
                      lam_eq=lam_eq, lam_ineq=lam_in, merit_history=merit_hist,
                      hessian=hess.B)
    log.debug(json.dumps({"event": "nlp_solve", "status": status, "iterations": it,
                          "stationarity": sol.stationarity, "feasibility": sol.feasibility,
                          "complementarity": sol.complementarity,
                          "wall_ms": 1e3 * sol.wall_time}))
    return sol




def _solve(problem, z, opts, hessian0, merit_hist):
    lb, ub = problem.lb, problem.ub
    n = problem.n
    reg = opts.reg_min
    mu_pen = 1.0
    restorations = 0
    pt = _Point(problem, z)
    hess = _Hessian(problem, opts, z, hessian0)
    lam_eq = np.zeros(pt.ce.size)
    lam_in = np.zeros(pt.ci.size)
    nu = np.zeros(n)
    stat, feas, comp = np.inf, pt.violation_inf(), np.inf

    def result(status):
        return hess, pt, status, it, stat, feas, comp, lam_eq, lam_in

    it = 0
    while it < opts.max_iter:
        if it > 0:
            stat, feas, comp = _kkt(pt, lam_eq, lam_in, nu, lb, ub)
            if stat <= opts.tol_kkt and feas <= opts.tol_feas and comp <= opts.tol_kkt:
                return result(OPTIMAL)
        it += 1
        B = hess.matrix(pt.z, lam_eq, lam_in)
        need_restoration = False
        while True:
            try:
                p, lam_eq_n, lam_in_n, nu_n, fac = _qp_step(B, pt, lb, ub, reg, hess.indefinite)
                break
            except (np.linalg.LinAlgError, QPIterationLimit):
                reg *= 10.0
                if reg > opts.reg_max:
                    raise NumericFail("unregularizable KKT system")
            except QPInfeasible:
                need_restoration = True
                break

        if not need_restoration:
            reg = max(reg / 10.0, opts.reg_min)
            mult_max = max(np.abs(lam_eq_n).max(initial=0.0), np.abs(lam_in_n).max(initial=0.0))
            if mu_pen < 1.1 * mult_max:
                mu_pen = max(1.5 * mult_max, 2.0 * mu_pen)
            viol0 = pt.violation_l1()
            phi0 = pt.f + mu_pen * viol0
            lin_viol = (np.abs(pt.ce + pt.je @ p).sum()
                        + np.maximum(pt.ci + pt.ji @ p, 0.0).sum())
            dphi = pt.g @ p + mu_pen * (lin_viol - viol0)
            step_tiny = np.abs(p).max(initial=0.0) <= 1e-12 * max(1.0, np.abs(pt.z).max())
            infeasible_now = pt.violation_inf() > opts.tol_feas
            if step_tiny:
                stat, feas, comp = _kkt(pt, lam_eq_n, lam_in_n, nu_n, lb, ub)
                if feas <= opts.tol_feas and stat <= opts.tol_kkt and comp <= opts.tol_kkt:
                    lam_eq, lam_in, nu = lam_eq_n, lam_in_n, nu_n
                    return result(OPTIMAL)
            # a step that cannot reduce the violation means the linearization is inconsistent
            if infeasible_now and (step_tiny or lin_viol >= viol0 * (1.0 - 1e-8)):
                need_restoration = True

        if need_restoration:
            if restorations >= 3:
                feas = pt.violation_inf()
                return result(INFEASIBLE)
            restorations += 1
            z_r, viol = restore_feasibility(problem, pt.z, opts)
            pt = _Point(problem, z_r)
            if viol > 100.0 * opts.tol_feas:
                feas = viol
                return result(INFEASIBLE)
            hess.reset(pt.z)
            continue

        alpha = 1.0
        accepted = None
        while alpha >= _MIN_STEP:
            z_try = np.clip(pt.z + alpha * p, lb, ub)
            f_t, ce_t, ci_t = _values(problem, z_try)
            phi_t = f_t + mu_pen * (np.abs(ce_t).sum() + np.maximum(ci_t, 0.0).sum())
            if np.isfinite(phi_t) and phi_t <= phi0 + _ARMIJO * alpha * min(dphi, 0.0):
                accepted = z_try
                merit_hist.append((phi0, phi_t))
                break
            if alpha == 1.0 and ce_t.size and np.isfinite(phi_t):
                # second-order correction against the Maratos effect
                z_soc = np.clip(z_try + fac.particular(ce_t), lb, ub)
                f_s, ce_s, ci_s = _values(problem, z_soc)
                phi_s = f_s + mu_pen * (np.abs(ce_s).sum() + np.maximum(ci_s, 0.0).sum())
                if np.isfinite(phi_s) and phi_s <= phi0 + _ARMIJO * min(dphi, 0.0):
                    accepted = z_soc
                    merit_hist.append((phi0, phi_s))
                    break
            alpha *= 0.5

        if accepted is None:
            stat, feas, comp = _kkt(pt, lam_eq_n, lam_in_n, nu_n, lb, ub)
            if feas <= opts.tol_feas and stat <= 10 * opts.tol_kkt and comp <= 10 * opts.tol_kkt:
                # merit is flat at roundoff level
                lam_eq, lam_in, nu = lam_eq_n, lam_in_n, nu_n
                return result(OPTIMAL)
            if feas > opts.tol_feas:
                if restorations >= 3:
                    return result(INFEASIBLE)
                restorations += 1
                z_r, viol = restore_feasibility(problem, pt.z, opts)
                pt = _Point(problem, z_r)
                if viol > 100.0 * opts.tol_feas:
                    feas = viol
                    return result(INFEASIBLE)
            hess.reset(pt.z)
            reg = min(reg * 10.0, opts.reg_max)
            continue

        pt_new = _Point(problem, accepted)
        lam_eq, lam_in, nu = lam_eq_n, lam_in_n, nu_n
        gl_old = pt.g + pt.je.T @ lam_eq + pt.ji.T @ lam_in
        gl_new = pt_new.g + pt_new.je.T @ lam_eq + pt_new.ji.T @ lam_in
        hess.update(pt_new.z - pt.z, gl_new - gl_old)
        pt = pt_new

    stat, feas, comp = _kkt(pt, lam_eq, lam_in, nu, lb, ub)
    if stat <= opts.tol_kkt and feas <= opts.tol_feas and comp <= opts.tol_kkt:
        return result(OPTIMAL)
    return result(ITER_LIMIT)
