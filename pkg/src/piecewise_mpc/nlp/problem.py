from dataclasses import dataclass, field
from typing import Callable, Optional, Sequence

import numpy as np

OPTIMAL = "Optimal"
INFEASIBLE = "Infeasible"
ITER_LIMIT = "IterLimit"
NUMERIC_FAIL = "NumericFail"


class NumericFail(Exception):
    """Non-finite function values or an unregularizable KKT system."""


@dataclass
class NlpProblem:
    """Smooth constrained program ``min f(z) s.t. c_eq(z) = 0, c_ineq(z) <= 0, lb <= z <= ub``.

    Jacobians are dense ``(m, n)`` arrays. ``residual``/``residual_jac`` may
    declare the objective as the sum of squares ``f = ||r(z)||^2``, which
    enables the Gauss-Newton Hessian. ``lagrangian_hessian(z, lam_eq, lam_ineq)``
    may supply the exact Hessian of ``f + lam_eq'c_eq + lam_ineq'c_ineq``. ``hessian_blocks`` partitions the
    variables into groups on which the Lagrangian is separable; quasi-Newton
    updates are then applied block by block.
    """

    n: int
    objective: Callable[[np.ndarray], float]
    gradient: Callable[[np.ndarray], np.ndarray]
    eq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    eq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq: Optional[Callable[[np.ndarray], np.ndarray]] = None
    ineq_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    residual: Optional[Callable[[np.ndarray], np.ndarray]] = None
    residual_jac: Optional[Callable[[np.ndarray], np.ndarray]] = None
    hessian_blocks: Optional[Sequence[np.ndarray]] = None
    lagrangian_hessian: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], np.ndarray]] = None

    def __post_init__(self):
        self.lb = np.full(self.n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(self.n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if self.lb.shape != (self.n,) or self.ub.shape != (self.n,):
            raise ValueError("bound vectors must have length n")
        if np.any(self.lb > self.ub):
            raise ValueError("lb > ub")

    def c_eq(self, z):
        return np.zeros(0) if self.eq is None else np.asarray(self.eq(z), float).ravel()

    def j_eq(self, z):
        if self.eq is None:
            return np.zeros((0, self.n))
        return np.asarray(self.eq_jac(z), float).reshape(-1, self.n)

    def c_ineq(self, z):
        return np.zeros(0) if self.ineq is None else np.asarray(self.ineq(z), float).ravel()

    def j_ineq(self, z):
        if self.ineq is None:
            return np.zeros((0, self.n))
        return np.asarray(self.ineq_jac(z), float).reshape(-1, self.n)


@dataclass
class SolverOptions:
    tol_kkt: float = 1e-6
    tol_feas: float = 1e-6
    max_iter: int = 200
    hessian: str = "bfgs"  # "bfgs" | "gauss-newton" | "exact"
    reg_min: float = 1e-8
    reg_max: float = 1e4
    hessian_init_reg: float = 1e-2
    max_restoration_iter: int = 100


@dataclass
class NlpSolution:
    z: np.ndarray
    objective: float
    status: str
    stationarity: float
    feasibility: float
    complementarity: float
    iterations: int
    wall_time: float
    lam_eq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    lam_ineq: np.ndarray = field(default_factory=lambda: np.zeros(0))
    merit_history: list = field(default_factory=list)
    hessian: Optional[np.ndarray] = None

    @property
    def ok(self):
        return self.status == OPTIMAL
