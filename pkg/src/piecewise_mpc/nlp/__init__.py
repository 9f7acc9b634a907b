from .derivatives import check_derivatives
from .problem import (INFEASIBLE, ITER_LIMIT, NUMERIC_FAIL, OPTIMAL, NlpProblem,
                      NlpSolution, NumericFail, SolverOptions)
from .qp import QPInfeasible, QPResult, solve_qp
from .sqp import solve

__all__ = [
    "INFEASIBLE", "ITER_LIMIT", "NUMERIC_FAIL", "OPTIMAL", "NlpProblem", "NlpSolution",
    "NumericFail", "QPInfeasible", "QPResult", "SolverOptions", "check_derivatives",
    "solve", "solve_qp",
]
