"""Receding-horizon policy that reuses a stored feasible trajectory.

At every step the policy solves up to ``M`` fixed-sequence problems whose
terminal state, terminal cost and region sequence are read from the stored
trajectory at anchors ``t_F = min(k_t + m, T)``, keeps the best one and
advances its bookkeeping ``(k_t, N_t)``.
"""

import time
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .ftocp import FtocpSolution, FtocpSpec, constraint_violation, solve_ftocp
from .nlp import NumericFail, SolverOptions
from .system import StageCost, Trajectory, cost_to_go

EARLY_STOP, EXHAUSTIVE = "early-stop", "exhaustive"


class InfeasibleAtM0(Exception):
    """The guaranteed (m = 0) candidate failed; a precondition of the policy is violated."""

    def __init__(self, t, status):
        super().__init__(f"m = 0 candidate failed at t = {t} with status {status}")
        self.t = t
        self.status = status


@dataclass
class PolicyState:
    """Mutable state of the policy.

    Parameters
    ----------
    system : PiecewiseSystem
    cost : StageCost
        Stage cost; ``stored.q`` must be its cost-to-go along ``stored``.
    stored : Trajectory
        Feasible trajectory of length T with regions and cost-to-go.
    N : int
        Initial horizon.
    M : int
        Maximum number of candidates per step.
    options : SolverOptions
    mode : {"early-stop", "exhaustive"}
        Exhaustive mode solves all M candidates and picks the argmin.
    match_tol : float
        Sup-norm tolerance for "the chosen terminal state is the stored final
        state". It must not exceed the terminal pin tolerance, otherwise the
        shifted solution no longer meets the next terminal constraint.
    shift_tol : float
        Constraint tolerance under which the shifted previous solution counts
        as a feasible m = 0 candidate.
    """

    system: object
    cost: StageCost
    stored: Trajectory
    N: int
    M: int = 1
    options: SolverOptions = field(default_factory=lambda: SolverOptions(hessian="exact"))
    mode: str = EARLY_STOP
    match_tol: float = 1e-6
    shift_tol: float = 1e-5
    k: int = field(init=False)
    N_t: int = field(init=False)
    t: int = field(init=False, default=0)
    _prev: Optional[tuple] = field(init=False, default=None, repr=False)

    def __post_init__(self):
        if self.M < 1:
            raise ValueError("M must be at least 1")
        if self.stored.q is None:
            raise ValueError("stored trajectory needs its cost-to-go")
        if self.mode not in (EARLY_STOP, EXHAUSTIVE):
            raise ValueError(f"unknown mode {self.mode!r}")
        if not 1 <= self.N <= max(self.T, 1):
            raise ValueError(f"need 1 <= N <= T, got N = {self.N}, T = {self.T}")
        self.reset()

    @property
    def T(self):
        return self.stored.T

    def reset(self):
        """Return to the initial bookkeeping ``k_0 = N_0 = N``."""
        self.k = self.N
        self.N_t = self.N
        self.t = 0
        self._prev = None

    def _matches_end(self, t):
        """Stored state ``t`` equals the stored final state within ``match_tol``."""
        st = self.stored
        return bool(np.max(np.abs(st.x[t] - st.x[self.T]), initial=0.0) <= self.match_tol)

    def regions_for(self, i_t, t_F):
        """``{i_t, i_{t_F-N_t+1}, ..., i_{t_F-1}}``."""
        lo = t_F - self.N_t + 1
        assert lo >= 1 or self.N_t == 1, "region window starts before the stored trajectory"
        return [int(i_t)] + [int(i) for i in self.stored.regions[lo:t_F]]


@dataclass
class PolicyStepResult:
    """Outcome of one policy evaluation."""

    t: int
    u: np.ndarray
    cost: float
    m_star: int
    t_F: int
    N_t: int
    k_t: int
    costs: List[float]
    solve_ms: List[float]
    wall_ms: float
    x_pred: Optional[np.ndarray] = None
    u_pred: Optional[np.ndarray] = None

    def log_record(self):
        """Per-step JSON log record; infeasible candidates have cost ``None``."""
        return {"t": self.t, "m_star": self.m_star, "t_F": self.t_F, "N_t": self.N_t,
                "k_t": self.k_t,
                "costs": [float(c) if np.isfinite(c) else None for c in self.costs],
                "wall_ms": float(self.wall_ms)}


def _m0_warm_start(ps, x_t):
    """Shifted previous solution (Case 2 / Case 3 construction) or stored prefix."""
    st = ps.stored
    N_t = ps.N_t
    if ps._prev is None:
        X = st.x[ps.k - N_t:ps.k + 1].copy()
        U = st.u[ps.k - N_t:ps.k].copy()
    else:
        Xp, Up, appended = ps._prev
        if appended:
            X = np.vstack([Xp[1:], st.x[ps.k][None]])
            U = np.vstack([Up[1:], st.u[ps.k - 1][None]])
        else:
            X, U = Xp[1:].copy(), Up[1:].copy()
    X[0] = x_t
    return X, U


def _shifted_candidate(spec, warm, tol):
    """The warm start as a solution if it satisfies the constraints of ``spec``."""
    X, U = warm
    if X.shape[0] != spec.N + 1 or constraint_violation(spec, X, U) > tol:
        return None
    stage = np.array([spec.stage_cost(k)(X[k], U[k]) for k in range(spec.N)])
    return FtocpSolution(X.copy(), U.copy(), float(np.sum(stage)) + spec.q_F, "Optimal",
                         X[-1].copy(), stage_costs=stage)


def policy_step(ps: PolicyState, x_t) -> PolicyStepResult:
    """Evaluate the policy at ``x_t`` and advance the bookkeeping.

    Raises
    ------
    InfeasibleAtM0
        If the m = 0 candidate has no solution.
    NoRegion
        If ``x_t`` lies outside every region.
    """
    start = time.perf_counter()
    x_t = np.asarray(x_t, float)
    system, st, T = ps.system, ps.stored, ps.T
    i_t = system.get_region(x_t)
    k_t, N_t = ps.k, ps.N_t

    if N_t == 1 and ps._matches_end(k_t) and system.in_goal(x_t, st.x[T]):
        # already at the stored terminal state: hold it with the invariance action
        u, _ = system.invariance_action(x_t)
        c = ps.cost(x_t, u) + float(st.q[T])
        ms = (time.perf_counter() - start) * 1e3
        ps._prev = None
        ps.t += 1
        return PolicyStepResult(ps.t - 1, u, c, 0, k_t, N_t, k_t, [c], [0.0], ms)

    costs, times, sols, anchors = [], [], [], []
    warm = _m0_warm_start(ps, x_t)
    m_star = None
    for m in range(ps.M):
        t_F = min(k_t + m, T)
        if m > 0 and t_F == anchors[-1]:
            # aliased anchor at the task end: every further candidate repeats this one
            break
        spec = FtocpSpec(system, ps.cost, x_t, st.x[t_F], float(st.q[t_F]),
                         ps.regions_for(i_t, t_F))
        if m > 0:
            if sols[-1] is not None:
                X, U = sols[-1].x.copy(), sols[-1].u.copy()
                X[-1] = st.x[t_F]
                warm = (X, U)
        t0 = time.perf_counter()
        try:
            sol = solve_ftocp(spec, warm_start=warm, options=ps.options)
            status = sol.status
        except NumericFail:
            sol, status = None, "NumericFail"
        if m == 0:
            # the shifted previous solution is feasible by construction; a local
            # solve may land on a worse point (costs with set indicators are not
            # seen by the optimizer), so keep whichever is cheaper
            shifted = _shifted_candidate(spec, warm, ps.shift_tol)
            if shifted is not None and (sol is None or not sol.ok or shifted.cost < sol.cost):
                sol = shifted
        times.append((time.perf_counter() - t0) * 1e3)
        ok = sol is not None and sol.ok
        if m == 0 and not ok:
            raise InfeasibleAtM0(ps.t, status)
        costs.append(sol.cost if ok else np.inf)
        sols.append(sol if ok else None)
        anchors.append(t_F)
        if ps.mode == EARLY_STOP and m > 0 and costs[m - 1] < costs[m]:
            m_star = m - 1
            break
    if m_star is None:
        m_star = int(np.argmin(costs))

    best = sols[m_star]
    t_F = anchors[m_star]
    if ps._matches_end(t_F):
        # the anchor stays put so the region window keeps matching the shifted plan;
        # when the stored trajectory idles at its end state before T, jumping to T
        # would slide the window onto the idle tail
        ps.N_t = max(1, N_t - 1)
        ps.k = t_F
        appended = False
    else:
        ps.k = k_t + m_star + 1
        appended = True
    ps._prev = (best.x, best.u, appended)
    ps.t += 1
    ms = (time.perf_counter() - start) * 1e3
    return PolicyStepResult(ps.t - 1, best.u[0].copy(), costs[m_star], m_star, t_F, N_t, k_t,
                            costs, times, ms, best.x, best.u)


def _disturbance_at(disturbance, t, n):
    if disturbance is None:
        return None
    if callable(disturbance):
        w = disturbance(t)
    elif isinstance(disturbance, dict):
        w = disturbance.get(t)
    else:
        w = disturbance[t] if t < len(disturbance) else None
    return None if w is None else np.asarray(w, float).reshape(n)


def run_closed_loop(ps: PolicyState, x_init, T=None, disturbance=None,
                    callback: Optional[Callable] = None):
    """Simulate ``x_{t+1} = f_{i_t}(x_t, pi(x_t)) + w_t`` for T steps.

    Parameters
    ----------
    disturbance : callable ``t -> w``, dict ``{t: w}`` or sequence, optional
        Additive state disturbance applied after step t.
    callback : callable ``(PolicyStepResult) -> None``, optional

    Returns
    -------
    traj : Trajectory
        Realized states, inputs and regions with cost-to-go filled in.
    log : list of PolicyStepResult

    Raises
    ------
    InfeasibleAtM0
        With the failing timestep in ``.t``.
    """
    T = ps.T if T is None else int(T)
    system = ps.system
    ps.reset()
    x = np.asarray(x_init, float)
    X, U, I, log = [x], [], [], []
    if T == 0:
        traj = Trajectory(np.array(X), np.zeros((0, system.d)), [])
        cost_to_go(traj, ps.cost)
        return traj, log
    for t in range(T):
        res = policy_step(ps, x)
        i = system.get_region(x)
        x = system.step(x, res.u, i)
        w = _disturbance_at(disturbance, t, system.n)
        if w is not None:
            x = x + w
        X.append(x)
        U.append(res.u)
        I.append(i)
        log.append(res)
        if callback is not None:
            callback(res)
    traj = Trajectory(np.array(X), np.array(U), I)
    cost_to_go(traj, ps.cost)
    return traj, log
