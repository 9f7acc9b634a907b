"""Piecewise nonlinear systems, stage costs and stored trajectories."""

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional, Sequence

import numpy as np

TAU_REGION = 1e-7
# strict inequalities enter transcriptions with this margin so that solutions
# pass the membership test, which requires residual < -TAU_REGION
STRICT_MARGIN = 2 * TAU_REGION


class NoRegion(Exception):
    """The state is outside every region of the model."""

    def __init__(self, x):
        super().__init__(f"state outside all regions: {np.array2string(np.asarray(x), precision=6)}")
        self.x = np.asarray(x)


def _empty(x):
    return np.zeros(0)


@dataclass(frozen=True)
class Region:
    """A region described by residual functions.

    Members satisfy ``eq(x) = 0``, ``ineq(x) <= 0`` and ``strict(x) < 0``.
    Each residual has a dense Jacobian companion. The optional ``*_hess``
    callables ``(x, w) -> (n, n)`` return the weighted sum of residual
    Hessians; leaving one unset declares that residual affine.
    """

    name: str
    eq: Callable = _empty
    eq_jac: Optional[Callable] = None
    ineq: Callable = _empty
    ineq_jac: Optional[Callable] = None
    strict: Callable = _empty
    strict_jac: Optional[Callable] = None
    eq_hess: Optional[Callable] = None
    ineq_hess: Optional[Callable] = None
    strict_hess: Optional[Callable] = None

    def violation(self, x, tol=TAU_REGION):
        """Largest amount by which x misses membership (0 when a member)."""
        e = np.abs(np.asarray(self.eq(x), float))
        h = np.asarray(self.ineq(x), float)
        s = np.asarray(self.strict(x), float)
        return max(np.max(e - tol, initial=0.0), np.max(h - tol, initial=0.0),
                   np.max(s + tol, initial=0.0), 0.0)

    def contains(self, x, tol=TAU_REGION):
        e = np.asarray(self.eq(x), float)
        h = np.asarray(self.ineq(x), float)
        s = np.asarray(self.strict(x), float)
        return bool(np.all(np.abs(e) <= tol) and np.all(h <= tol) and np.all(s < -tol))


class PiecewiseSystem:
    """``x+ = f_i(x, u)`` if ``x`` lies in region ``i``.

    Parameters
    ----------
    n, d : int
        State and input dimensions.
    regions : sequence of Region
    dynamics : sequence of callables ``f_i(x, u) -> x+``
    dynamics_jac : sequence of callables ``(x, u) -> (A, B)``
    state_lb, state_ub, input_lb, input_ub : arrays, optional
        Box parts of the state and input constraint sets.
    state_ineq, state_ineq_jac : callables, optional
        Extra state constraints ``g(x) <= 0``.
    x_goal, eps_goal :
        The goal set is the sup-norm ball of radius ``eps_goal`` around ``x_goal``.
    invariance_action : callable ``x -> (u, i)``
        Input and region keeping goal states in the goal set.
    dynamics_hess : sequence of callables ``(x, u, w) -> (n+d, n+d)``, optional
        Hessian of ``w' f_i(x, u)`` in ``(x, u)``; unset means affine dynamics.
    """

    def __init__(self, n, d, regions, dynamics, dynamics_jac, *, state_lb=None, state_ub=None,
                 input_lb=None, input_ub=None, state_ineq=None, state_ineq_jac=None,
                 x_goal=None, eps_goal=1e-3, invariance_action=None, name="system",
                 dynamics_hess=None):
        if not (len(regions) == len(dynamics) == len(dynamics_jac)):
            raise ValueError("one dynamics map and Jacobian per region required")
        self.n, self.d = int(n), int(d)
        self.regions = list(regions)
        self.dynamics = list(dynamics)
        self.dynamics_jac = list(dynamics_jac)
        self.dynamics_hess = None if dynamics_hess is None else list(dynamics_hess)
        self.state_lb = np.full(n, -np.inf) if state_lb is None else np.asarray(state_lb, float)
        self.state_ub = np.full(n, np.inf) if state_ub is None else np.asarray(state_ub, float)
        self.input_lb = np.full(d, -np.inf) if input_lb is None else np.asarray(input_lb, float)
        self.input_ub = np.full(d, np.inf) if input_ub is None else np.asarray(input_ub, float)
        self.state_ineq = state_ineq
        self.state_ineq_jac = state_ineq_jac
        self.x_goal = None if x_goal is None else np.asarray(x_goal, float)
        self.eps_goal = float(eps_goal)
        self._invariance_action = invariance_action
        self.name = name

    @property
    def R(self):
        return len(self.regions)

    def get_region(self, x):
        """Index of the region containing x; ties go to the lowest index."""
        x = np.asarray(x, float)
        if not np.all(np.isfinite(x)):
            raise NoRegion(x)
        for i, region in enumerate(self.regions):
            if region.contains(x):
                return i
        raise NoRegion(x)

    def step(self, x, u, i):
        return np.asarray(self.dynamics[i](np.asarray(x, float), np.asarray(u, float)), float)

    def step_jac(self, x, u, i):
        A, B = self.dynamics_jac[i](np.asarray(x, float), np.asarray(u, float))
        return np.asarray(A, float), np.asarray(B, float)

    def state_violation(self, x):
        x = np.asarray(x, float)
        v = max(np.max(self.state_lb - x, initial=0.0), np.max(x - self.state_ub, initial=0.0))
        if self.state_ineq is not None:
            v = max(v, np.max(np.asarray(self.state_ineq(x), float), initial=0.0))
        return max(v, 0.0)

    def input_violation(self, u):
        u = np.asarray(u, float)
        return max(np.max(self.input_lb - u, initial=0.0), np.max(u - self.input_ub, initial=0.0), 0.0)

    def goal_distance(self, x, center=None):
        c = self.x_goal if center is None else np.asarray(center, float)
        return float(np.max(np.abs(np.asarray(x, float) - c)))

    def in_goal(self, x, center=None):
        return self.goal_distance(x, center) <= self.eps_goal

    def invariance_action(self, x):
        if self._invariance_action is None:
            raise NotImplementedError(f"{self.name} has no invariance action")
        u, i = self._invariance_action(np.asarray(x, float))
        return np.asarray(u, float), int(i)


@dataclass(frozen=True)
class StageCost:
    """Stage cost ``l(x, u) >= 0``.

    ``residual``/``residual_jac`` declare the smooth part as ``||r(x, u)||^2``.
    ``constant_part`` is a piecewise-constant term (e.g. a set indicator) that
    counts toward reported costs but carries no gradient, so optimizers work
    on ``smooth`` only. ``hessian(x, u)`` returns the ``(n+d, n+d)`` Hessian of
    ``smooth``; without it the residual form gives ``2 J'J``, exact for affine
    residuals.
    """

    smooth: Callable
    gradient: Callable
    residual: Optional[Callable] = None
    residual_jac: Optional[Callable] = None
    constant_part: Optional[Callable] = None
    vanishes_on_goal: bool = False
    hessian: Optional[Callable] = None

    def stage_hessian(self, x, u):
        if self.hessian is not None:
            return np.asarray(self.hessian(x, u), float)
        if self.residual_jac is not None:
            Jx, Ju = self.residual_jac(x, u)
            J = np.hstack([np.atleast_2d(Jx), np.atleast_2d(Ju)])
            return 2.0 * J.T @ J
        return None

    def __call__(self, x, u):
        v = float(self.smooth(x, u))
        if self.constant_part is not None:
            v += float(self.constant_part(x))
        return v


def _zero_hessian(x, u):
    return np.zeros((len(x) + len(u), len(x) + len(u)))


def zero_cost():
    return StageCost(smooth=lambda x, u: 0.0,
                     gradient=lambda x, u: (np.zeros(len(x)), np.zeros(len(u))),
                     vanishes_on_goal=True, hessian=_zero_hessian)


def constant_cost(value=1.0):
    return StageCost(smooth=lambda x, u: 0.0,
                     gradient=lambda x, u: (np.zeros(len(x)), np.zeros(len(u))),
                     constant_part=lambda x: value, hessian=_zero_hessian)


def quadratic_cost(Q, R, x_ref, u_ref=None):
    """``(x - x_ref)'Q(x - x_ref) + (u - u_ref)'R(u - u_ref)`` with PSD diagonal Q, R."""
    Q = np.atleast_1d(np.asarray(Q, float))
    R = np.atleast_1d(np.asarray(R, float))
    q = np.diag(Q) if Q.ndim == 2 else Q
    r = np.diag(R) if R.ndim == 2 else R
    x_ref = np.asarray(x_ref, float)
    u_ref = np.zeros(r.size) if u_ref is None else np.asarray(u_ref, float)
    sq, sr = np.sqrt(q), np.sqrt(r)

    def smooth(x, u):
        dx, du = x - x_ref, u - u_ref
        return float(dx @ (q * dx) + du @ (r * du))

    def gradient(x, u):
        return 2.0 * q * (x - x_ref), 2.0 * r * (u - u_ref)

    def residual(x, u):
        return np.concatenate([sq * (x - x_ref), sr * (u - u_ref)])

    def residual_jac(x, u):
        nx, nu = q.size, r.size
        Jx = np.vstack([np.diag(sq), np.zeros((nu, nx))])
        Ju = np.vstack([np.zeros((nx, nu)), np.diag(sr)])
        return Jx, Ju

    return StageCost(smooth, gradient, residual, residual_jac)


@dataclass
class Trajectory:
    """States x_0..x_T, inputs u_0..u_{T-1}, regions i_0..i_{T-1}, cost-to-go q_0..q_T."""

    x: np.ndarray
    u: np.ndarray
    regions: np.ndarray
    q: Optional[np.ndarray] = None

    def __post_init__(self):
        self.x = np.atleast_2d(np.asarray(self.x, float))
        T = self.x.shape[0] - 1
        self.u = np.asarray(self.u, float).reshape(T, -1) if T else np.zeros((0, np.asarray(self.u).shape[-1] if np.asarray(self.u).ndim == 2 else 0))
        self.regions = np.asarray(self.regions, dtype=int).reshape(T)
        if self.q is not None:
            self.q = np.asarray(self.q, float).reshape(T + 1)

    @property
    def T(self):
        return self.x.shape[0] - 1

    @property
    def n(self):
        return self.x.shape[1]

    @property
    def d(self):
        return self.u.shape[1]


def cost_to_go(traj, cost):
    """Backward recursion ``q_T = 0``, ``q_t = l(x_t, u_t) + q_{t+1}``; stored on ``traj``."""
    T = traj.T
    q = np.zeros(T + 1)
    for t in range(T - 1, -1, -1):
        q[t] = cost(traj.x[t], traj.u[t]) + q[t + 1]
    traj.q = q
    return q


@dataclass
class Violation:
    t: int
    kind: str
    residual: float


@dataclass
class FeasibilityReport:
    violations: List[Violation] = field(default_factory=list)

    @property
    def ok(self):
        return not self.violations

    def __bool__(self):
        return self.ok

    def max_residual(self, kind=None):
        vals = [v.residual for v in self.violations if kind is None or v.kind == kind]
        return max(vals, default=0.0)

    def kinds(self):
        return sorted({v.kind for v in self.violations})


def check_feasible(system, traj, cost=None, tol=1e-6, goal_center=None):
    """List every violated trajectory constraint.

    Checks dynamics, region membership, state and input sets for t < T, goal
    membership of x_T and, if ``cost`` is given and ``traj.q`` is set, the
    cost-to-go recursion.
    """
    rep = FeasibilityReport()
    T = traj.T
    for t in range(T):
        x, u, i = traj.x[t], traj.u[t], int(traj.regions[t])
        if not 0 <= i < system.R:
            rep.violations.append(Violation(t, "region", np.inf))
            continue
        r = np.max(np.abs(traj.x[t + 1] - system.step(x, u, i)))
        if r > tol:
            rep.violations.append(Violation(t, "dynamics", float(r)))
        r = system.regions[i].violation(x, tol=TAU_REGION)
        if r > tol:
            rep.violations.append(Violation(t, "region", float(r)))
        r = system.state_violation(x)
        if r > tol:
            rep.violations.append(Violation(t, "state", float(r)))
        r = system.input_violation(u)
        if r > tol:
            rep.violations.append(Violation(t, "input", float(r)))
    if system.x_goal is not None or goal_center is not None:
        dist = system.goal_distance(traj.x[T], goal_center)
        if dist > system.eps_goal:
            rep.violations.append(Violation(T, "terminal", dist - system.eps_goal))
    if cost is not None and traj.q is not None:
        if abs(traj.q[T]) > tol:
            rep.violations.append(Violation(T, "cost-to-go", abs(traj.q[T])))
        for t in range(T):
            r = abs(traj.q[t] - cost(traj.x[t], traj.u[t]) - traj.q[t + 1])
            if r > tol * max(1.0, abs(traj.q[t])):
                rep.violations.append(Violation(t, "cost-to-go", float(r)))
    return rep


def save_trajectory_csv(traj, path):
    """Write ``t, x_0.., u_0.., region, q``; the final row leaves input and region empty."""
    n, d, T = traj.n, traj.d, traj.T
    header = ["t"] + [f"x_{k}" for k in range(n)] + [f"u_{k}" for k in range(d)] + ["region", "q"]
    q = traj.q if traj.q is not None else np.full(T + 1, np.nan)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for t in range(T + 1):
            row = [str(t)] + [format(v, ".17g") for v in traj.x[t]]
            if t < T:
                row += [format(v, ".17g") for v in traj.u[t]] + [str(int(traj.regions[t]))]
            else:
                row += [""] * d + [""]
            row.append(format(q[t], ".17g"))
            w.writerow(row)


def load_trajectory_csv(path):
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    header = [h.strip() for h in rows[0]]
    n = sum(h.startswith("x_") for h in header)
    d = sum(h.startswith("u_") for h in header)
    body = rows[1:]
    x = np.array([[float(v) for v in r[1:1 + n]] for r in body])
    u = np.array([[float(v) for v in r[1 + n:1 + n + d]] for r in body[:-1]]).reshape(-1, d)
    regions = np.array([int(r[1 + n + d]) for r in body[:-1]], dtype=int)
    q = np.array([float(r[2 + n + d]) for r in body])
    if np.all(np.isnan(q)):
        q = None
    return Trajectory(x=x, u=u, regions=regions, q=q)


def dims_of(traj_or_system: Sequence) -> tuple:
    return traj_or_system.n, traj_or_system.d
