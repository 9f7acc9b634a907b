"""Fixed-region-sequence finite-horizon optimal control problems.

``J(x_t, x_F, q_F, I_t, N)``: reach ``x_F`` in ``N`` steps from ``x_t`` while
visiting the regions ``I_t`` in order, minimizing the summed stage cost. The
transcription uses multiple shooting::

    z = (x_0, ..., x_N, u_0, ..., u_{N-1})
"""

from dataclasses import dataclass, field
from typing import Optional, Sequence, Union

import numpy as np

from .nlp import NlpProblem, NumericFail, SolverOptions, solve
from .nlp.problem import OPTIMAL
from .system import STRICT_MARGIN, StageCost

PIN, GOAL, FREE = "pin", "goal", "free"


@dataclass
class FtocpSpec:
    """One instance of the fixed-sequence problem.

    Parameters
    ----------
    system : PiecewiseSystem
    cost : StageCost or sequence of N StageCost
        A sequence gives a different cost per stage (used by tracking MPC).
    x0, x_F : arrays
        Initial state and terminal state.
    q_F : float
        Terminal cost, added to the objective after the solve.
    regions : sequence of int
        Region index for each of the N stages.
    terminal : {"pin", "goal", "free"}
        ``pin`` enforces ``x_N = x_F``, ``goal`` enforces ``x_N`` in the goal set,
        ``free`` leaves ``x_N`` unconstrained except for the state set.
    """

    system: object
    cost: Union[StageCost, Sequence[StageCost]]
    x0: np.ndarray
    x_F: Optional[np.ndarray]
    q_F: float
    regions: Sequence[int]
    eps_term: float = 1e-6
    terminal: str = PIN
    goal_center: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, float)
        self.x_F = None if self.x_F is None else np.asarray(self.x_F, float)
        self.regions = tuple(int(i) for i in self.regions)
        if len(self.regions) < 1:
            raise ValueError("horizon N must be at least 1")
        if self.terminal not in (PIN, GOAL, FREE):
            raise ValueError(f"unknown terminal mode {self.terminal!r}")
        if self.terminal == PIN and self.x_F is None:
            raise ValueError("pinned terminal needs x_F")

    @property
    def N(self):
        return len(self.regions)

    def stage_cost(self, k):
        if isinstance(self.cost, StageCost):
            return self.cost
        return self.cost[k]


@dataclass
class FtocpSolution:
    x: np.ndarray
    u: np.ndarray
    cost: float
    status: str
    x_terminal: Optional[np.ndarray]
    nlp: object = None
    stage_costs: np.ndarray = field(default_factory=lambda: np.zeros(0))

    @property
    def ok(self):
        return self.status == OPTIMAL


class Transcription:
    """Multiple-shooting NLP of an FtocpSpec, with per-point evaluation caching."""

    def __init__(self, spec):
        self.spec = spec
        sysm = spec.system
        self.n, self.d, self.N = sysm.n, sysm.d, spec.N
        n, d, N = self.n, self.d, self.N
        self.nz = (N + 1) * n + N * d
        self.nx = (N + 1) * n
        self._key = None
        self._cache = None

        lb = np.full(self.nz, -np.inf)
        ub = np.full(self.nz, np.inf)
        last = N + 1 if spec.terminal != PIN else N
        for k in range(last):
            lb[k * n:(k + 1) * n] = sysm.state_lb
            ub[k * n:(k + 1) * n] = sysm.state_ub
        for k in range(N):
            lb[self.nx + k * d:self.nx + (k + 1) * d] = sysm.input_lb
            ub[self.nx + k * d:self.nx + (k + 1) * d] = sysm.input_ub
        self.lb, self.ub = lb, ub

        self.has_residual = all(spec.stage_cost(k).residual is not None for k in range(N))
        self.blocks = [np.concatenate([np.arange(k * n, (k + 1) * n),
                                       np.arange(self.nx + k * d, self.nx + (k + 1) * d)])
                       for k in range(N)] + [np.arange(N * n, (N + 1) * n)]

    def split(self, z):
        z = np.asarray(z, float)
        X = z[:self.nx].reshape(self.N + 1, self.n)
        U = z[self.nx:].reshape(self.N, self.d)
        return X, U

    def pack(self, X, U):
        return np.concatenate([np.asarray(X, float).ravel(), np.asarray(U, float).ravel()])

    def _evaluate(self, z):
        key = z.tobytes()
        if key == self._key:
            return self._cache
        spec, sysm = self.spec, self.spec.system
        n, d, N, nx, nz = self.n, self.d, self.N, self.nx, self.nz
        X, U = self.split(z)
        ucol = lambda k: slice(nx + k * d, nx + (k + 1) * d)
        xcol = lambda k: slice(k * n, (k + 1) * n)

        eq_rows, eq_jac, in_rows, in_jac = [], [], [], []
        # curvature bookkeeping: (is_eq, first row, rows, stage, hessian fn, state only)
        curv = []
        count = {True: 0, False: 0}

        def add(rows, jacs, r, J_x=None, k=None, J_u=None, hess=None):
            r = np.atleast_1d(np.asarray(r, float))
            if r.size == 0:
                return
            J = np.zeros((r.size, nz))
            if J_x is not None:
                J[:, xcol(k)] = J_x
            if J_u is not None:
                J[:, ucol(k)] = J_u
            is_eq = rows is eq_rows
            if hess is not None:
                curv.append((is_eq, count[is_eq], r.size, k, hess, True))
            count[is_eq] += r.size
            rows.append(r)
            jacs.append(J)

        # initial pin
        J = np.zeros((n, nz))
        J[:, xcol(0)] = np.eye(n)
        eq_rows.append(X[0] - spec.x0)
        eq_jac.append(J)
        count[True] += n
        # dynamics defects
        J = np.zeros((N * n, nz))
        defects = np.empty(N * n)
        for k, i in enumerate(spec.regions):
            f = sysm.step(X[k], U[k], i)
            A, B = sysm.step_jac(X[k], U[k], i)
            rs = slice(k * n, (k + 1) * n)
            defects[rs] = X[k + 1] - f
            J[rs, xcol(k + 1)] = np.eye(n)
            J[rs, xcol(k)] = -A
            J[rs, ucol(k)] = -B
            if sysm.dynamics_hess is not None:
                hf = sysm.dynamics_hess[i]
                curv.append((True, count[True] + k * n, n, k,
                             lambda x, u, w, hf=hf: -hf(x, u, w), False))
        eq_rows.append(defects)
        eq_jac.append(J)
        count[True] += N * n
        # terminal
        if spec.terminal == PIN:
            J = np.zeros((n, nz))
            J[:, xcol(N)] = np.eye(n)
            eq_rows.append(X[N] - spec.x_F)
            eq_jac.append(J)
            count[True] += n
        elif spec.terminal == GOAL:
            c = sysm.x_goal if spec.goal_center is None else spec.goal_center
            e = X[N] - c
            # shrink the ball so solutions within the feasibility tolerance pass in_goal
            r = sysm.eps_goal - 2.0 * spec.eps_term
            add(in_rows, in_jac, np.concatenate([e - r, -e - r]),
                np.vstack([np.eye(n), -np.eye(n)]), N)
        # regions and general state constraints
        for k, i in enumerate(spec.regions):
            reg = sysm.regions[i]
            x = X[k]
            e = np.atleast_1d(reg.eq(x))
            if e.size:
                add(eq_rows, eq_jac, e, reg.eq_jac(x), k, hess=reg.eq_hess)
            h = np.atleast_1d(reg.ineq(x))
            if h.size:
                add(in_rows, in_jac, h, reg.ineq_jac(x), k, hess=reg.ineq_hess)
            s = np.atleast_1d(reg.strict(x))
            if s.size:
                add(in_rows, in_jac, s + STRICT_MARGIN, reg.strict_jac(x), k, hess=reg.strict_hess)
            if sysm.state_ineq is not None:
                add(in_rows, in_jac, sysm.state_ineq(x), sysm.state_ineq_jac(x), k)
        if spec.terminal != PIN and sysm.state_ineq is not None:
            add(in_rows, in_jac, sysm.state_ineq(X[N]), sysm.state_ineq_jac(X[N]), N)

        ce = np.concatenate(eq_rows)
        je = np.vstack(eq_jac)
        ci = np.concatenate(in_rows) if in_rows else np.zeros(0)
        ji = np.vstack(in_jac) if in_jac else np.zeros((0, nz))

        f = 0.0
        g = np.zeros(nz)
        res, rjac = [], []
        for k in range(N):
            l = spec.stage_cost(k)
            f += float(l.smooth(X[k], U[k]))
            gx, gu = l.gradient(X[k], U[k])
            g[xcol(k)] += gx
            g[ucol(k)] += gu
            if self.has_residual:
                r = np.atleast_1d(l.residual(X[k], U[k]))
                Jx, Ju = l.residual_jac(X[k], U[k])
                Jr = np.zeros((r.size, nz))
                Jr[:, xcol(k)] = Jx
                Jr[:, ucol(k)] = Ju
                res.append(r)
                rjac.append(Jr)
        r = np.concatenate(res) if res else None
        Jr = np.vstack(rjac) if rjac else None
        self._key = key
        self._cache = (f, g, ce, je, ci, ji, r, Jr, curv)
        return self._cache

    def lagrangian_hessian(self, z, lam_eq, lam_in):
        """Exact Hessian of ``f + lam_eq'c_eq + lam_in'c_in``, assembled stage by stage."""
        curv = self._evaluate(z)[8]
        X, U = self.split(z)
        spec = self.spec
        H = np.zeros((self.nz, self.nz))
        for k in range(self.N):
            idx = self.blocks[k]
            H[np.ix_(idx, idx)] += spec.stage_cost(k).stage_hessian(X[k], U[k])
        n = self.n
        for is_eq, start, size, k, fn, state_only in curv:
            lam = lam_eq if is_eq else lam_in
            w = lam[start:start + size] if lam.size else np.zeros(size)
            if not np.any(w):
                continue
            if state_only:
                idx = self.blocks[k][:n] if k < self.N else self.blocks[k]
                H[np.ix_(idx, idx)] += fn(X[k], w)
            else:
                idx = self.blocks[k]
                H[np.ix_(idx, idx)] += fn(X[k], U[k], w)
        return H

    @property
    def has_hessian(self):
        return all(self.spec.stage_cost(k).stage_hessian(self.spec.x0, np.zeros(self.d)) is not None
                   for k in range(self.N))

    def problem(self):
        ev = self._evaluate
        return NlpProblem(
            n=self.nz,
            objective=lambda z: ev(z)[0],
            gradient=lambda z: ev(z)[1],
            eq=lambda z: ev(z)[2],
            eq_jac=lambda z: ev(z)[3],
            ineq=lambda z: ev(z)[4],
            ineq_jac=lambda z: ev(z)[5],
            lb=self.lb, ub=self.ub,
            residual=(lambda z: ev(z)[6]) if self.has_residual else None,
            residual_jac=(lambda z: ev(z)[7]) if self.has_residual else None,
            hessian_blocks=self.blocks,
            lagrangian_hessian=self.lagrangian_hessian if self.has_hessian else None,
        )


def transcribe(spec):
    """Build the NLP of ``spec`` (the terminal cost q_F is not part of it)."""
    return Transcription(spec).problem()


def default_warm_start(spec):
    """Linear interpolation from x_t to x_F with zero inputs."""
    N, d = spec.N, spec.system.d
    end = spec.x_F if spec.x_F is not None else spec.x0
    s = np.linspace(0.0, 1.0, N + 1)[:, None]
    X = (1 - s) * spec.x0 + s * end
    return X, np.zeros((N, d))


def solve_ftocp(spec, warm_start=None, options=None, hessian0=None):
    """Solve ``spec``.

    Returns an FtocpSolution with ``cost = sum_k l(x_k, u_k) + q_F`` on
    success; otherwise the cost is ``inf`` and the sequences are empty.

    Raises
    ------
    NumericFail
        Propagated from the solver.
    """
    tr = Transcription(spec)
    if warm_start is None:
        warm_start = default_warm_start(spec)
    X0, U0 = warm_start
    X0 = np.array(X0, float, copy=True)
    X0[0] = spec.x0
    if spec.terminal == PIN:
        X0[-1] = spec.x_F
    z0 = tr.pack(X0, U0)
    sol = solve(tr.problem(), z0, options or SolverOptions(), hessian0=hessian0)
    if sol.status == "NumericFail":
        raise NumericFail(f"solver failed numerically on an N={spec.N} problem")
    if not sol.ok:
        return FtocpSolution(np.zeros((0, tr.n)), np.zeros((0, tr.d)), np.inf, sol.status,
                             None, nlp=sol)
    X, U = tr.split(sol.z)
    X, U = X.copy(), U.copy()
    stage = np.array([spec.stage_cost(k)(X[k], U[k]) for k in range(spec.N)])
    cost = float(np.sum(stage)) + float(spec.q_F)
    return FtocpSolution(X, U, cost, sol.status, X[-1].copy(), nlp=sol, stage_costs=stage)


def constraint_violation(spec, X, U):
    """Largest violation of the transcription constraints at ``(X, U)``."""
    tr = Transcription(spec)
    z = tr.pack(X, U)
    p = tr.problem()
    v = [np.max(np.abs(p.c_eq(z)), initial=0.0),
         np.max(p.c_ineq(z), initial=0.0),
         np.max(p.lb - z, initial=0.0),
         np.max(z - p.ub, initial=0.0)]
    return float(max(v))
