"""Two-region piecewise-affine double integrator used as a small test system.

The state ``x = (x1, x2)`` is position and velocity and the input is an
acceleration. Region 0 (``x1 <= 0``) is an undamped double integrator and
region 1 (``x1 > 0``, strict) adds velocity damping::

    x+ = A_i x + B u,   A_i = [[1, dt], [0, a_i]],   B = [[0], [dt]]

The goal is the origin, held by a region-wise deadbeat feedback.
"""

from dataclasses import dataclass

import numpy as np

from .system import (PiecewiseSystem, Region, Trajectory, check_feasible, cost_to_go,
                     quadratic_cost)


@dataclass(frozen=True)
class PwaParams:
    dt: float = 0.1
    damping: tuple = (1.0, 0.9)
    x_max: tuple = (5.0, 2.0)
    u_max: float = 5.0
    q: tuple = (1.0, 1.0)
    r: float = 0.1


def pwa_matrices(params=PwaParams()):
    """Per-region ``(A_i, B)`` pairs."""
    dt = params.dt
    B = np.array([[0.0], [dt]])
    return [(np.array([[1.0, dt], [0.0, a]]), B) for a in params.damping]


def deadbeat_gain(A, B):
    """Gain K with ``(A - B K)^2 = 0`` for a single-input 2-state pair."""
    # Ackermann's formula with target polynomial z^2
    C = np.hstack([B, A @ B])
    return np.array([0.0, 1.0]) @ np.linalg.solve(C, A @ A)


def make_pwa_system(params=PwaParams(), eps_goal=1e-3):
    """The two-region system with goal set around the origin."""
    mats = pwa_matrices(params)
    regions = [
        Region("left", ineq=lambda x: np.array([x[0]]),
               ineq_jac=lambda x: np.array([[1.0, 0.0]])),
        Region("right", strict=lambda x: np.array([-x[0]]),
               strict_jac=lambda x: np.array([[-1.0, 0.0]])),
    ]
    dyn = [lambda x, u, A=A, B=B: A @ x + B @ u for A, B in mats]
    jac = [lambda x, u, A=A, B=B: (A, B) for A, B in mats]
    gains = [deadbeat_gain(A, B) for A, B in mats]
    x_max = np.asarray(params.x_max, float)
    u_max = np.array([params.u_max])
    system = None

    def invariance_action(x):
        i = system.get_region(x)
        u = np.clip(-gains[i] @ x, -u_max, u_max)
        return np.atleast_1d(u), i

    system = PiecewiseSystem(
        2, 1, regions, dyn, jac,
        state_lb=-x_max, state_ub=x_max, input_lb=-u_max, input_ub=u_max,
        x_goal=np.zeros(2), eps_goal=eps_goal,
        invariance_action=invariance_action, name="synthetic-pwa")
    return system


def pwa_cost(params=PwaParams()):
    """``x'Qx + r u^2``, vanishing at the origin with zero input."""
    c = quadratic_cost(np.asarray(params.q, float), np.array([params.r]), np.zeros(2))
    return type(c)(c.smooth, c.gradient, c.residual, c.residual_jac, vanishes_on_goal=True)


def rollout(system, x_S, T, feedback):
    """Simulate ``u = feedback(x)`` clipped to the input box for T steps."""
    x = np.asarray(x_S, float)
    X, U, I = [x], [], []
    for _ in range(T):
        i = system.get_region(x)
        u = np.clip(np.atleast_1d(feedback(x)), system.input_lb, system.input_ub)
        x = system.step(x, u, i)
        X.append(x)
        U.append(u)
        I.append(i)
    return np.array(X), np.array(U), I


def generate_pwa_trajectory(system, x_S, T, cost, gains=(3.0, 1.5)):
    """Feasible trajectory from ``x_S`` ending exactly at the origin after T steps.

    A lightly damped PD law ``u = -k1 x1 - k2 x2`` runs for ``T - 2`` steps (it
    overshoots into the damped region), then two deadbeat steps land on the
    origin. The result is deliberately suboptimal so that iterative
    improvement has room to act.

    With ``T = 0`` the start must already be in the goal set and the result is
    the empty trajectory.

    Raises
    ------
    ValueError
        If T is 1 or negative, or T is 0 and ``x_S`` is outside the goal set.
    RuntimeError
        If an input leaves the input box or the result is infeasible.
    """
    if T == 0:
        if not system.in_goal(x_S):
            raise ValueError("T = 0 needs a start state inside the goal set")
        traj = Trajectory(np.asarray(x_S, float)[None], np.zeros((0, system.d)), [])
        cost_to_go(traj, cost)
        return traj
    if T < 2:
        raise ValueError("T must be 0 or at least 2")
    k1, k2 = gains
    mats = [(system.step_jac(np.zeros(2), np.zeros(1), i)) for i in range(system.R)]
    dead = [deadbeat_gain(A, B) for A, B in mats]
    x = np.asarray(x_S, float)
    X, U, I = [x], [], []
    for t in range(T):
        i = system.get_region(x)
        u = -dead[i] @ x if t >= T - 2 else -k1 * x[0] - k2 * x[1]
        u = np.atleast_1d(u)
        if system.input_violation(u) > 0:
            raise RuntimeError(f"input {u[0]:.3g} at step {t} leaves the input box")
        x = system.step(x, u, i)
        X.append(x)
        U.append(u)
        I.append(i)
    traj = Trajectory(np.array(X), np.array(U), I)
    cost_to_go(traj, cost)
    report = check_feasible(system, traj)
    if not report.ok or not system.in_goal(traj.x[-1]):
        raise RuntimeError("generated trajectory is not feasible")
    return traj


def optimal_pwa_trajectory(system, x_S, T, cost, max_rounds=10, options=None):
    """Trajectory from ``x_S`` to the origin, optimal for its own region sequence.

    The region sequence of a clipped deadbeat rollout seeds a fixed-sequence
    solve with the terminal state pinned to the origin; the sequence is then
    re-read from the solution until it no longer changes.

    Raises
    ------
    RuntimeError
        If a fixed-sequence solve fails or the sequence keeps changing.
    """
    from .ftocp import FtocpSpec, solve_ftocp
    from .nlp import SolverOptions

    mats = [system.step_jac(np.zeros(2), np.zeros(1), i) for i in range(system.R)]
    dead = [deadbeat_gain(A, B) for A, B in mats]
    X, U, seq = rollout(system, x_S, T, lambda x: -dead[system.get_region(x)] @ x)
    options = options or SolverOptions(hessian="exact")
    for _ in range(max_rounds):
        spec = FtocpSpec(system, cost, x_S, system.x_goal, 0.0, seq)
        sol = solve_ftocp(spec, warm_start=(X, U), options=options)
        if not sol.ok:
            raise RuntimeError(f"fixed-sequence solve failed: {sol.status}")
        X, U = sol.x, sol.u
        new_seq = [system.get_region(x) for x in X[:-1]]
        if new_seq == list(seq):
            traj = Trajectory(X, U, list(seq))
            cost_to_go(traj, cost)
            if not check_feasible(system, traj).ok:
                raise RuntimeError("trajectory is not feasible")
            return traj
        seq = new_seq
    raise RuntimeError("region sequence did not settle")
