"""Dense strictly convex QP solver (dual active-set method of Goldfarb and Idnani).

Solves::

    min  0.5 x'Hx + g'x
    s.t. A_eq x  = b_eq
         A_in x <= b_in

``H`` must be symmetric positive definite. The dual method starts from the
unconstrained minimizer and never needs a feasible starting point, which is
what an SQP subproblem wants.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy.linalg import cho_factor, cho_solve, solve_triangular


class QPIterationLimit(RuntimeError):
    """The active-set loop did not terminate (cycling or severe ill-conditioning)."""


class QPInfeasible(Exception):
    """The constraint set of the QP is empty."""


@dataclass
class QPResult:
    x: np.ndarray
    obj: float
    lam_eq: np.ndarray
    lam_in: np.ndarray
    active: list = field(default_factory=list)
    iterations: int = 0


def _householder_apply(J, q, d):
    """Reflect columns q: of J so that J'n has zeros below entry q.

    Returns the new value of (J'n)[q].
    """
    v = d[q:].copy()
    alpha = np.linalg.norm(v)
    if alpha == 0.0:
        return 0.0
    if v[0] > 0:
        alpha = -alpha
    v[0] -= alpha
    vnorm2 = v @ v
    if vnorm2 == 0.0:
        return alpha
    Jq = J[:, q:]
    Jq -= np.outer(Jq @ v, (2.0 / vnorm2) * v)
    return alpha


def _givens_drop(J, R, q, k):
    """Remove active column k of R (size q) and retriangularize in place."""
    R[:q, k:q - 1] = R[:q, k + 1:q]
    R[:q, q - 1] = 0.0
    for j in range(k, q - 1):
        a, b = R[j, j], R[j + 1, j]
        h = np.hypot(a, b)
        if h == 0.0:
            continue
        c, s = a / h, b / h
        rows = R[[j, j + 1], j:q - 1]
        R[j, j:q - 1] = c * rows[0] + s * rows[1]
        R[j + 1, j:q - 1] = -s * rows[0] + c * rows[1]
        R[j + 1, j] = 0.0
        cols = J[:, [j, j + 1]]
        J[:, j] = c * cols[:, 0] + s * cols[:, 1]
        J[:, j + 1] = -s * cols[:, 0] + c * cols[:, 1]


def _polish(H, g, N, b, flip, meq, active, x, u, tol):
    """Re-solve the KKT system of the final active set.

    The product-form updates lose accuracy on ill-conditioned Hessians, which
    shows up as active constraints that are no longer met exactly. A direct
    solve restores them; the result is kept only if it stays primal and dual
    feasible.
    """
    q = len(active)
    if q == 0:
        return x, u
    signs = np.array([flip[c] if c < meq else 1.0 for c in active])
    A = N[active] * signs[:, None]
    rhs_b = b[active] * signs
    n = x.size
    K = np.zeros((n + q, n + q))
    K[:n, :n] = H
    K[:n, n:] = -A.T
    K[n:, :n] = A
    try:
        sol = np.linalg.solve(K, np.concatenate([-g, rhs_b]))
    except np.linalg.LinAlgError:
        return x, u
    x_new, u_new = sol[:n], sol[n:]
    if not np.all(np.isfinite(sol)):
        return x, u
    dual_ok = all(u_new[j] >= -1e-8 * max(1.0, np.abs(u_new).max()) or active[j] < meq
                  for j in range(q))
    slack = N[meq:] @ x_new - b[meq:]
    primal_ok = slack.size == 0 or slack.min() >= -max(tol, 1e-9)
    old_err = np.abs(A @ x - rhs_b).max()
    new_err = np.abs(A @ x_new - rhs_b).max()
    if dual_ok and primal_ok and new_err <= old_err:
        u_new = np.where(np.array(active) >= meq, np.maximum(u_new, 0.0), u_new)
        return x_new, u_new
    return x, u


def solve_qp(H, g, A_eq=None, b_eq=None, A_in=None, b_in=None,
             tol=1e-10, max_iter=None):
    """Solve a strictly convex QP.

    Parameters
    ----------
    H : (n, n) array
        Positive definite Hessian.
    g : (n,) array
        Linear term.
    A_eq, b_eq : arrays, optional
        Equality constraints ``A_eq x = b_eq``.
    A_in, b_in : arrays, optional
        Inequality constraints ``A_in x <= b_in``.
    tol : float
        Feasibility tolerance on row-normalized constraints.

    Returns
    -------
    QPResult
        Minimizer and multipliers with ``H x + g + A_eq' lam_eq + A_in' lam_in = 0``
        and ``lam_in >= 0``.

    Raises
    ------
    QPInfeasible
        If the constraints admit no point.
    np.linalg.LinAlgError
        If H is not positive definite.
    """
    g = np.asarray(g, dtype=float)
    n = g.size
    A_eq = np.zeros((0, n)) if A_eq is None else np.atleast_2d(np.asarray(A_eq, float))
    b_eq = np.zeros(0) if b_eq is None else np.asarray(b_eq, float).ravel()
    A_in = np.zeros((0, n)) if A_in is None else np.atleast_2d(np.asarray(A_in, float))
    b_in = np.zeros(0) if b_in is None else np.asarray(b_in, float).ravel()
    meq, min_ = A_eq.shape[0], A_in.shape[0]

    # internal form: N x >= b with unit-norm rows
    N = np.vstack([A_eq, -A_in])
    b = np.concatenate([b_eq, -b_in])
    scale = np.linalg.norm(N, axis=1) if N.size else np.zeros(0)
    zero_rows = scale == 0.0
    scale[zero_rows] = 1.0
    N = N / scale[:, None]
    b = b / scale
    if np.any(zero_rows):
        bad_eq = zero_rows[:meq] & (np.abs(b[:meq]) > tol)
        bad_in = zero_rows[meq:] & (b[meq:] > tol)
        if np.any(bad_eq) or np.any(bad_in):
            raise QPInfeasible("zero constraint row with nonzero right-hand side")

    cf = cho_factor(H, lower=True)
    L = np.tril(cf[0])
    J = solve_triangular(L, np.eye(n), lower=True).T.copy()
    x = -cho_solve(cf, g)

    R = np.zeros((n, n))
    active = []
    u = np.zeros(0)
    flip = np.ones(meq)
    eq_done = np.zeros(meq, dtype=bool)
    if meq:
        eq_done[zero_rows[:meq]] = True
    ineq_idx = np.arange(meq, meq + min_)
    in_active = np.zeros(meq + min_, dtype=bool)
    in_active[meq:][zero_rows[meq:]] = True
    if max_iter is None:
        max_iter = 20 * (n + meq + min_) + 50
    it = 0

    while True:
        # select the constraint to add
        p = None
        for e in np.flatnonzero(~eq_done):
            s_e = N[e] @ x - b[e]
            eq_done[e] = True
            if s_e > 0:
                flip[e] = -1.0
            p = e
            break
        if p is None:
            if min_ == 0:
                break
            slack = N[meq:] @ x - b[meq:]
            slack[in_active[meq:]] = np.inf
            j = int(np.argmin(slack))
            if slack[j] >= -tol:
                break
            p = ineq_idx[j]
        sign = flip[p] if p < meq else 1.0
        n_p = sign * N[p]
        b_p = sign * b[p]
        s_p = n_p @ x - b_p
        u_plus = 0.0

        while True:
            it += 1
            if it > max_iter:
                raise QPIterationLimit("QP iteration limit reached")
            q = len(active)
            d = J.T @ n_p
            z = J[:, q:] @ d[q:]
            r = solve_triangular(R[:q, :q], d[:q]) if q else np.zeros(0)
            t1, k_drop = np.inf, -1
            for j in range(q):
                if active[j] >= meq and r[j] > 0.0:
                    ratio = u[j] / r[j]
                    if ratio < t1:
                        t1, k_drop = ratio, j
            zn = z @ n_p
            t2 = -s_p / zn if np.linalg.norm(z) > 1e-13 and zn > 1e-14 else np.inf
            t = min(t1, t2)
            if not np.isfinite(t):
                if p < meq and abs(s_p) <= tol:
                    # redundant equality, already satisfied
                    break
                raise QPInfeasible("constraints are inconsistent")
            if np.isfinite(t2):
                x = x + t * z
            u = u - t * r
            u_plus += t
            s_p = n_p @ x - b_p
            if t2 <= t1:
                # full step: p joins the active set
                R[:q, q] = d[:q]
                R[q, q] = _householder_apply(J, q, d)
                active.append(p)
                in_active[p] = True
                u = np.append(u, u_plus)
                break
            # partial step: drop a blocking inequality and retry p
            in_active[active[k_drop]] = False
            _givens_drop(J, R, q, k_drop)
            del active[k_drop]
            u = np.delete(u, k_drop)

    x, u = _polish(H, g, N, b, flip, meq, active, x, u, tol)
    lam_eq = np.zeros(meq)
    lam_in = np.zeros(min_)
    for j, c in enumerate(active):
        if c < meq:
            lam_eq[c] = -flip[c] * u[j] / scale[c]
        else:
            lam_in[c - meq] = u[j] / scale[c]
    obj = 0.5 * x @ H @ x + g @ x
    return QPResult(x=x, obj=float(obj), lam_eq=lam_eq, lam_in=lam_in,
                    active=[c for c in active], iterations=it)
