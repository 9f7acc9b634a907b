"""Shared checks used by several test modules."""

import numpy as np

from piecewise_mpc.ftocp import FtocpSpec, constraint_violation
from piecewise_mpc.policy import PolicyState, policy_step


def shift_violation(system, cost, stored, N, M, options):
    """Worst constraint violation of the shifted candidates along a nominal closed loop.

    At each step the chosen solution is shifted by one (Case 2) or shifted and
    extended with the next stored state and input (Case 3), then checked
    against the transcription the policy solves at the next step.
    """
    ps = PolicyState(system, cost, stored, N, M, options=options)
    x = stored.x[0]
    worst = 0.0
    for _ in range(stored.T):
        res = policy_step(ps, x)
        x_next = system.step(x, res.u, system.get_region(x))
        if res.x_pred is not None:
            k = ps.k
            X, U = res.x_pred, res.u_pred
            if np.max(np.abs(stored.x[res.t_F] - stored.x[-1])) <= ps.match_tol:
                Xs, Us = X[1:], U[1:]  # Case 2: the horizon shrinks
            else:  # Case 3: append the next stored pair
                Xs = np.vstack([X[1:], stored.x[k][None]])
                Us = np.vstack([U[1:], stored.u[k - 1][None]])
            if Us.shape[0] >= 1:
                spec = FtocpSpec(system, cost, x_next, stored.x[k], float(stored.q[k]),
                                 ps.regions_for(system.get_region(x_next), k))
                worst = max(worst, constraint_violation(spec, Xs, Us))
        x = x_next
    return worst
