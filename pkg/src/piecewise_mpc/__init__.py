"""Iterative receding-horizon control for piecewise nonlinear systems.

A stored feasible trajectory seeds a shrinking-horizon policy whose terminal
constraints and region sequences come from that trajectory; each closed-loop
run can become the next stored trajectory.
"""

from .ftocp import FREE, GOAL, PIN, FtocpSolution, FtocpSpec, solve_ftocp
from .iteration import IterationRecord, completion_time, iterate, min_time_cost
from .nlp import NumericFail, SolverOptions
from .policy import (EARLY_STOP, EXHAUSTIVE, InfeasibleAtM0, PolicyState, policy_step,
                     run_closed_loop)
from .system import (NoRegion, PiecewiseSystem, Region, StageCost, Trajectory, check_feasible,
                     cost_to_go, load_trajectory_csv, quadratic_cost, save_trajectory_csv)

__all__ = [
    "EARLY_STOP", "EXHAUSTIVE", "FREE", "GOAL", "PIN", "FtocpSolution", "FtocpSpec",
    "InfeasibleAtM0", "IterationRecord", "NoRegion", "NumericFail", "PiecewiseSystem",
    "PolicyState", "Region", "SolverOptions", "StageCost", "Trajectory", "check_feasible",
    "completion_time", "cost_to_go", "iterate", "load_trajectory_csv", "min_time_cost",
    "policy_step", "quadratic_cost", "run_closed_loop", "save_trajectory_csv", "solve_ftocp",
]
