"""Policy iteration: each closed-loop trajectory becomes the next stored trajectory."""

import csv
from dataclasses import dataclass, field
from typing import Callable, List, Optional

import numpy as np

from .nlp import SolverOptions
from .policy import EARLY_STOP, PolicyState, run_closed_loop
from .system import StageCost, Trajectory, cost_to_go


def _outside_indicator(x, center, eps):
    return 0.0 if np.max(np.abs(np.asarray(x, float) - center)) <= eps else 1.0


def min_time_stage_cost(x, u, base, x_goal, eps_goal=1e-3, weight=1e-4):
    """``1(x) + weight * l(x, u)`` with ``1(x) = 0`` inside the goal ball and 1 outside."""
    return _outside_indicator(x, np.asarray(x_goal, float), eps_goal) + weight * base(x, u)


def min_time_cost(base: StageCost, x_goal, eps_goal=1e-3, weight=1e-4) -> StageCost:
    """StageCost form of :func:`min_time_stage_cost`.

    The indicator is piecewise constant, so it enters as ``constant_part``:
    optimizers see ``weight * l`` while reported costs include the indicator.
    """
    center = np.asarray(x_goal, float)
    root = np.sqrt(weight)
    base_const = base.constant_part

    def constant_part(x):
        extra = 0.0 if base_const is None else weight * float(base_const(x))
        return _outside_indicator(x, center, eps_goal) + extra

    def gradient(x, u):
        gx, gu = base.gradient(x, u)
        return weight * np.asarray(gx, float), weight * np.asarray(gu, float)

    residual = residual_jac = hessian = None
    if base.residual is not None:
        def residual(x, u):
            return root * np.asarray(base.residual(x, u), float)

        def residual_jac(x, u):
            Jx, Ju = base.residual_jac(x, u)
            return root * np.asarray(Jx, float), root * np.asarray(Ju, float)
    if base.hessian is not None:
        def hessian(x, u):
            return weight * np.asarray(base.hessian(x, u), float)

    return StageCost(smooth=lambda x, u: weight * float(base.smooth(x, u)), gradient=gradient,
                     residual=residual, residual_jac=residual_jac,
                     constant_part=constant_part, vanishes_on_goal=base.vanishes_on_goal,
                     hessian=hessian)


def completion_time(system, traj, center=None):
    """First t with ``x_t`` in the goal ball, or None if never reached."""
    for t, x in enumerate(traj.x):
        if system.in_goal(x, center):
            return t
    return None


@dataclass
class IterationRecord:
    """One pass of the iteration loop (j = 0 is the initial trajectory)."""

    j: int
    traj: Trajectory
    q0: float
    completion_time: Optional[int]
    solve_ms: np.ndarray = field(default_factory=lambda: np.zeros(0))
    log: list = field(default_factory=list, repr=False)

    @property
    def mean_solve_ms(self):
        return float(np.mean(self.solve_ms)) if self.solve_ms.size else float("nan")

    @property
    def max_solve_ms(self):
        return float(np.max(self.solve_ms)) if self.solve_ms.size else float("nan")


def iterate(system, cost, initial: Trajectory, M, N, j_max, x_S=None, T=None,
            options: Optional[SolverOptions] = None, mode=EARLY_STOP,
            goal_center=None, callback: Optional[Callable] = None) -> List[IterationRecord]:
    """Run ``j_max`` policy iterations starting from ``initial``.

    Each iteration builds the policy from the previous trajectory, simulates
    it from ``x_S`` for T steps and recomputes the cost-to-go with
    ``q_T = 0``. T is carried over unchanged from ``initial``.

    Returns
    -------
    list of IterationRecord
        Iteration 0 (the initial trajectory) followed by iterations 1..j_max.

    Raises
    ------
    InfeasibleAtM0, NoRegion, NumericFail
        Re-raised with attribute ``iteration`` set to the failing index.
    """
    x_S = initial.x[0] if x_S is None else np.asarray(x_S, float)
    T = initial.T if T is None else int(T)
    if T != initial.T:
        raise ValueError("stored trajectories keep the initial length T")
    options = options or SolverOptions(hessian="exact")
    stored = Trajectory(initial.x.copy(), initial.u.copy(), initial.regions.copy())
    cost_to_go(stored, cost)
    records = [IterationRecord(0, stored, float(stored.q[0]),
                               completion_time(system, stored, goal_center))]
    if callback is not None:
        callback(records[0])
    for j in range(1, j_max + 1):
        ps = PolicyState(system, cost, stored, N, M, options=options, mode=mode)
        try:
            traj, log = run_closed_loop(ps, x_S, T)
        except Exception as err:
            err.iteration = j
            raise
        rec = IterationRecord(j, traj, float(traj.q[0]), completion_time(system, traj, goal_center),
                              np.array([r.wall_ms for r in log]), log)
        records.append(rec)
        if callback is not None:
            callback(rec)
        stored = traj
    return records


SUMMARY_COLUMNS = ["j", "q0", "completion_time", "mean_solve_ms", "max_solve_ms"]


def write_summary_csv(records, path):
    """One row per iteration; empty fields where a value does not exist."""
    def fmt(v):
        if v is None or (isinstance(v, float) and np.isnan(v)):
            return ""
        return repr(v) if isinstance(v, float) else str(v)

    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(SUMMARY_COLUMNS)
        for r in records:
            w.writerow([r.j, fmt(r.q0), fmt(r.completion_time), fmt(r.mean_solve_ms),
                        fmt(r.max_solve_ms)])
