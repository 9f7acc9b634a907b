"""Discretized spring loaded inverted pendulum (SLIP) with massless legs.

State ``x = [p_x, p_y, v_x, v_y, z_x^l, z_x^r, z_y^l, z_y^r]`` and input
``u = [delta, v_z, v_y^l, v_y^r]``. Three contact regions: double support
(``DS``), left stance (``LEFT``) and right stance (``RIGHT``).
"""

import logging
from dataclasses import dataclass, replace

import numpy as np
from scipy.optimize import brentq, minimize_scalar

from .ftocp import Transcription
from .nlp import SolverOptions, solve
from .system import PiecewiseSystem, Region, StageCost, Trajectory, check_feasible, cost_to_go

log = logging.getLogger(__name__)

PX, PY, VX, VY, ZXL, ZXR, ZYL, ZYR = range(8)
DS, LEFT, RIGHT = 0, 1, 2
REGION_NAMES = ("ds", "l", "r")
CONTACTS = {DS: (1, 1), LEFT: (1, 0), RIGHT: (0, 1)}
PHYSICAL, PAPER_LITERAL = "physical", "paper-literal"


class GenerationFailed(Exception):
    """No feasible trajectory for the requested region sequence.

    ``kind`` is ``"contradiction"`` for region sequences that break a gait
    rule, ``"precondition"`` for start states that do not fit the sequence and
    ``"numerical"`` when the solver cannot reach the goal set.
    """

    def __init__(self, message, kind="numerical"):
        super().__init__(message)
        self.kind = kind


@dataclass(frozen=True)
class SlipParams:
    l0: float = 0.55
    l_max: float = 0.2
    delta0: float = 100.0
    m: float = 1.0
    g: float = 9.81
    dt: float = 0.01
    delta_max: float = 10.0
    vz_max: float = 10.0
    py_min: float = 0.1
    dynamics: str = PHYSICAL

    def __post_init__(self):
        if min(self.l0, self.l_max, self.delta0, self.m, self.g, self.dt) <= 0:
            raise ValueError("SLIP parameters must be positive")
        if self.l_max >= self.l0:
            raise ValueError("l_max must be smaller than l0")
        if self.dynamics not in (PHYSICAL, PAPER_LITERAL):
            raise ValueError(f"unknown dynamics form {self.dynamics!r}")


def _foot(side):
    if side in ("l", 0):
        return ZXL
    if side in ("r", 1):
        return ZXR
    raise ValueError(f"side must be 'l' or 'r', got {side!r}")


def leg_angle(x, side):
    """Angle of the leg from the vertical, ``atan2(p_x - z_x, p_y)``."""
    return float(np.arctan2(x[PX] - x[_foot(side)], x[PY]))


def leg_compression(x, side, params=SlipParams()):
    """``l0`` minus the CoM-to-foot distance (positive when compressed)."""
    return float(params.l0 - np.hypot(x[PX] - x[_foot(side)], x[PY]))


def _leg_terms(x, zx, l0):
    """Spring force components ``l*sin(theta)`` and ``l*cos(theta)`` and their partials.

    Returns ``(Fx, Fy, dFx, dFy)`` where ``dF*`` are derivatives with respect
    to ``(delta_x, p_y)``, ``delta_x = p_x - z_x``.
    """
    dx, py = x[PX] - zx, x[PY]
    dist = np.hypot(dx, py)
    inv3 = 1.0 / dist ** 3
    Fx = l0 * dx / dist - dx
    Fy = l0 * py / dist - py
    dFx = (l0 * py * py * inv3 - 1.0, -l0 * dx * py * inv3)
    dFy = (-l0 * dx * py * inv3, l0 * dx * dx * inv3 - 1.0)
    return Fx, Fy, dFx, dFy


def slip_dynamics(x, u, contact, params=SlipParams()):
    """One explicit Euler step under contact flags ``(gamma_l, gamma_r)``."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    gl, gr = contact
    k = u[0] + params.delta0
    Fxl, Fyl, _, _ = _leg_terms(x, x[ZXL], params.l0)
    Fxr, Fyr, _, _ = _leg_terms(x, x[ZXR], params.l0)
    if params.dynamics == PAPER_LITERAL:
        # printed form: l^r cos(theta^r) also in the horizontal row
        ax = k * (gl * Fxl + gr * Fyr)
    else:
        ax = k * (gl * Fxl + gr * Fxr)
    ay = k * (gl * Fyl + gr * Fyr) - params.m * params.g
    rate = np.array([x[VX], x[VY], ax, ay, (1 - gl) * u[1], (1 - gr) * u[1], u[2], u[3]])
    return x + params.dt * rate


def slip_dynamics_jac(x, u, contact, params=SlipParams()):
    """Jacobians ``(A, B)`` of :func:`slip_dynamics`."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    gl, gr = contact
    dt = params.dt
    k = u[0] + params.delta0
    Fxl, Fyl, dFxl, dFyl = _leg_terms(x, x[ZXL], params.l0)
    Fxr, Fyr, dFxr, dFyr = _leg_terms(x, x[ZXR], params.l0)
    hr = dFyr if params.dynamics == PAPER_LITERAL else dFxr
    Fhr = Fyr if params.dynamics == PAPER_LITERAL else Fxr

    A = np.eye(8)
    A[PX, VX] = dt
    A[PY, VY] = dt
    # d/dp_x = d/d(delta_x); d/dz_x = -d/d(delta_x)
    A[VX, PX] = dt * k * (gl * dFxl[0] + gr * hr[0])
    A[VX, PY] = dt * k * (gl * dFxl[1] + gr * hr[1])
    A[VX, ZXL] = -dt * k * gl * dFxl[0]
    A[VX, ZXR] = -dt * k * gr * hr[0]
    A[VY, PX] = dt * k * (gl * dFyl[0] + gr * dFyr[0])
    A[VY, PY] = dt * k * (gl * dFyl[1] + gr * dFyr[1])
    A[VY, ZXL] = -dt * k * gl * dFyl[0]
    A[VY, ZXR] = -dt * k * gr * dFyr[0]

    B = np.zeros((8, 4))
    B[VX, 0] = dt * (gl * Fxl + gr * Fhr)
    B[VY, 0] = dt * (gl * Fyl + gr * Fyr)
    B[ZXL, 1] = dt * (1 - gl)
    B[ZXR, 1] = dt * (1 - gr)
    B[ZYL, 2] = dt
    B[ZYR, 3] = dt
    return A, B


def _leg_curvature(x, zx, l0):
    """Second derivatives of ``Fx`` and ``Fy`` in ``(delta_x, p_y)`` as 2x2 arrays."""
    a, b = x[PX] - zx, x[PY]
    d2 = a * a + b * b
    c = l0 / (d2 * d2 * np.sqrt(d2))
    Hx = c * np.array([[-3.0 * a * b * b, b * (2 * a * a - b * b)],
                       [b * (2 * a * a - b * b), -a * (a * a - 2 * b * b)]])
    Hy = c * np.array([[-b * (b * b - 2 * a * a), a * (2 * b * b - a * a)],
                       [a * (2 * b * b - a * a), -3.0 * a * a * b]])
    return Hx, Hy


def _leg_map(foot):
    """Rows of ``d(delta_x, p_y)/dx`` restricted to ``(p_x, p_y, z_x)``."""
    T = np.zeros((8, 2))
    T[PX, 0] = 1.0
    T[PY, 1] = 1.0
    T[foot, 0] = -1.0
    return T


def slip_dynamics_hess(x, u, contact, w, params=SlipParams()):
    """Hessian of ``w' slip_dynamics(x, u)`` in ``(x, u)``, a 12x12 array."""
    x = np.asarray(x, float)
    gl, gr = contact
    k = u[0] + params.delta0
    dt = params.dt
    H = np.zeros((12, 12))
    grad_delta = np.zeros(8)
    for foot, gamma in ((ZXL, gl), (ZXR, gr)):
        if not gamma:
            continue
        Hx, Hy = _leg_curvature(x, x[foot], params.l0)
        _, _, dFx, dFy = _leg_terms(x, x[foot], params.l0)
        if params.dynamics == PAPER_LITERAL and foot == ZXR:
            Hh, dFh = Hy, dFy
        else:
            Hh, dFh = Hx, dFx
        T = _leg_map(foot)
        Hab = w[VX] * Hh + w[VY] * Hy
        H[:8, :8] += dt * k * (T @ Hab @ T.T)
        grad_delta += dt * T @ (w[VX] * np.asarray(dFh) + w[VY] * np.asarray(dFy))
    H[:8, 8] += grad_delta
    H[8, :8] += grad_delta
    return H


def _compression_hess(x, foot, w):
    """Hessian of ``w * (l0 - |(p_x - z_x, p_y)|)`` in x."""
    a, b = x[PX] - x[foot], x[PY]
    d3 = np.hypot(a, b) ** 3
    T = _leg_map(foot)
    return -w * (T @ (np.array([[b * b, -a * b], [-a * b, a * a]]) / d3) @ T.T)


def _compression_grad(x, foot, l0):
    """Gradient of ``l0 - |(p_x - z_x, p_y)|`` with respect to x."""
    dx, py = x[PX] - x[foot], x[PY]
    dist = np.hypot(dx, py)
    g = np.zeros(8)
    g[PX] = -dx / dist
    g[PY] = -py / dist
    g[foot] = dx / dist
    return g


def slip_regions(params=SlipParams()):
    """Residual descriptions of the double-support, left-stance and right-stance regions."""
    l0, lmax = params.l0, params.l_max

    def comp(x, foot):
        return l0 - np.hypot(x[PX] - x[foot], x[PY]) - lmax

    def unit(i):
        e = np.zeros(8)
        e[i] = 1.0
        return e

    ds = Region(
        "ds",
        eq=lambda x: np.array([x[ZYL], x[ZYR]]),
        eq_jac=lambda x: np.vstack([unit(ZYL), unit(ZYR)]),
        ineq=lambda x: np.array([comp(x, ZXR), comp(x, ZXL)]),
        ineq_jac=lambda x: np.vstack([_compression_grad(x, ZXR, l0), _compression_grad(x, ZXL, l0)]),
        ineq_hess=lambda x, w: _compression_hess(x, ZXR, w[0]) + _compression_hess(x, ZXL, w[1]),
    )
    left = Region(
        "l",
        eq=lambda x: np.array([x[ZYL]]),
        eq_jac=lambda x: unit(ZYL)[None, :],
        ineq=lambda x: np.array([comp(x, ZXR)]),
        ineq_jac=lambda x: _compression_grad(x, ZXR, l0)[None, :],
        ineq_hess=lambda x, w: _compression_hess(x, ZXR, w[0]),
        strict=lambda x: np.array([-x[ZYR]]),
        strict_jac=lambda x: -unit(ZYR)[None, :],
    )
    right = Region(
        "r",
        eq=lambda x: np.array([x[ZYR]]),
        eq_jac=lambda x: unit(ZYR)[None, :],
        ineq=lambda x: np.array([comp(x, ZXL)]),
        ineq_jac=lambda x: _compression_grad(x, ZXL, l0)[None, :],
        ineq_hess=lambda x, w: _compression_hess(x, ZXL, w[0]),
        strict=lambda x: np.array([-x[ZYL]]),
        strict_jac=lambda x: -unit(ZYL)[None, :],
    )
    return [ds, left, right]


def equilibrium_delta(x, params=SlipParams()):
    """Stiffness change balancing gravity in double support at state x."""
    _, Fyl, _, _ = _leg_terms(x, x[ZXL], params.l0)
    _, Fyr, _, _ = _leg_terms(x, x[ZXR], params.l0)
    return params.m * params.g / (Fyl + Fyr) - params.delta0


def rest_state(px, half_stance=0.15, params=SlipParams(), delta=0.0):
    """Symmetric double-support state at rest where stiffness change ``delta`` balances gravity.

    The CoM height solves ``(delta + delta0) * sum_k l^k cos(theta^k) = m g``.
    """
    target = params.m * params.g / (delta + params.delta0)

    def gap(py):
        d = np.hypot(half_stance, py)
        return 2.0 * (params.l0 - d) * py / d - target

    # the vertical force vanishes at py = 0 and at full extension; the upper
    # root (between the force peak and full extension) is the standing height
    top = np.sqrt(params.l0 ** 2 - half_stance ** 2)
    peak = minimize_scalar(lambda py: -gap(py), bounds=(1e-6, top), method="bounded",
                           options={"xatol": 1e-12}).x
    if gap(peak) <= 0.0:
        raise ValueError("springs cannot carry the weight at this stance width")
    py = brentq(gap, peak, top, xtol=1e-15, rtol=1e-15)
    return np.array([px, py, 0.0, 0.0, px - half_stance, px + half_stance, 0.0, 0.0])


def make_slip_system(x_goal, eps_goal=1e-3, params=SlipParams()):
    """Piecewise system for SLIP with goal set around ``x_goal``."""
    regions = slip_regions(params)
    dyn, jac, hess = [], [], []
    for r in (DS, LEFT, RIGHT):
        c = CONTACTS[r]
        dyn.append(lambda x, u, c=c: slip_dynamics(x, u, c, params))
        jac.append(lambda x, u, c=c: slip_dynamics_jac(x, u, c, params))
        hess.append(lambda x, u, w, c=c: slip_dynamics_hess(x, u, c, w, params))
    state_lb = np.array([-np.inf, params.py_min, -np.inf, -np.inf, -np.inf, -np.inf, 0.0, 0.0])
    input_lb = np.array([-params.delta_max, -params.vz_max, -np.inf, -np.inf])
    x_goal = np.asarray(x_goal, float)

    def invariance_action(x):
        return np.array([equilibrium_delta(x, params), 0.0, 0.0, 0.0]), DS

    return PiecewiseSystem(
        8, 4, regions, dyn, jac,
        state_lb=state_lb, state_ub=np.full(8, np.inf),
        input_lb=input_lb, input_ub=-input_lb,
        x_goal=x_goal, eps_goal=eps_goal,
        invariance_action=invariance_action, name="slip", dynamics_hess=hess)


_COST_WEIGHTS = np.array([1.0, 10.0, 1.0, 1.0])
_INPUT_WEIGHTS = np.array([1.0, 0.1])


def slip_stage_cost(x, u, goal):
    """``(p_x-g_x)^2 + 10 (p_y-g_y)^2 + v_x^2 + v_y^2 + delta^2 + 0.1 v_z^2``."""
    return float((x[PX] - goal[PX]) ** 2 + 10.0 * (x[PY] - goal[PY]) ** 2 + x[VX] ** 2
                 + x[VY] ** 2 + u[0] ** 2 + 0.1 * u[1] ** 2)


def make_slip_cost(goal):
    """The walking stage cost as a StageCost with a least-squares residual."""
    goal = np.asarray(goal, float)
    sw = np.sqrt(_COST_WEIGHTS)
    su = np.sqrt(_INPUT_WEIGHTS)
    Jx = np.zeros((6, 8))
    Jx[[0, 1, 2, 3], [PX, PY, VX, VY]] = sw
    Ju = np.zeros((6, 4))
    Ju[[4, 5], [0, 1]] = su

    def residual(x, u):
        return np.concatenate([sw * (x[:4] - np.array([goal[PX], goal[PY], 0.0, 0.0])), su * u[:2]])

    def gradient(x, u):
        gx = np.zeros(8)
        gx[:4] = 2.0 * _COST_WEIGHTS * (x[:4] - np.array([goal[PX], goal[PY], 0.0, 0.0]))
        gu = np.zeros(4)
        gu[:2] = 2.0 * _INPUT_WEIGHTS * u[:2]
        return gx, gu

    return StageCost(smooth=lambda x, u: slip_stage_cost(x, u, goal), gradient=gradient,
                     residual=residual, residual_jac=lambda x, u: (Jx, Ju))


def gait_sequence(template):
    """Expand a template such as ``"ds:20, l:25, ds:10"`` into region indices."""
    seq = []
    for part in template.split(","):
        part = part.strip()
        if not part:
            continue
        name, _, count = part.partition(":")
        name = name.strip().lower()
        if name not in REGION_NAMES:
            raise ValueError(f"unknown region {name!r} in gait template")
        try:
            reps = int(count)
        except ValueError:
            raise ValueError(f"bad phase length in {part!r}") from None
        if reps < 0:
            raise ValueError(f"negative phase length in {part!r}")
        seq += [REGION_NAMES.index(name)] * reps
    return seq


def _contradiction(regions, x_S, x_goal):
    """First gait rule that a region sequence breaks, or None.

    Stance must pass through double support: switching directly between left
    and right stance would need both feet to change contact in a single step.
    """
    for k in range(1, len(regions)):
        a, b = regions[k - 1], regions[k]
        if {a, b} == {LEFT, RIGHT}:
            return (f"step {k}: {REGION_NAMES[a]} stance followed directly by "
                    f"{REGION_NAMES[b]} stance swaps both feet in one step")
    return None


def _interpolated_guess(regions, x_S, x_goal, params):
    """Initial guess: CoM and feet move linearly; swing feet lift off the ground."""
    T = len(regions)
    X = np.zeros((T + 1, 8))
    s = np.linspace(0.0, 1.0, T + 1)
    X[:] = (1 - s)[:, None] * x_S + s[:, None] * x_goal
    lift = 0.02
    for k, r in enumerate(regions):
        if r == LEFT:
            X[k, ZYR] = lift
        elif r == RIGHT:
            X[k, ZYL] = lift
        else:
            X[k, ZYL] = X[k, ZYR] = 0.0
    X[T, ZYL] = X[T, ZYR] = 0.0
    U = np.zeros((T, 4))
    for k in range(T):
        U[k, 2] = (X[k + 1, ZYL] - X[k, ZYL]) / params.dt
        U[k, 3] = (X[k + 1, ZYR] - X[k, ZYR]) / params.dt
    # keep stance feet still: feet only move during their swing phases
    for foot, stance in ((ZXL, (DS, LEFT)), (ZXR, (DS, RIGHT))):
        swing_steps = [k for k, r in enumerate(regions) if r not in stance]
        total = x_goal[foot] - x_S[foot]
        pos = x_S[foot]
        per = total / len(swing_steps) if swing_steps else 0.0
        for k in range(T):
            X[k, foot] = pos
            if k in swing_steps:
                U[k, 1] = per / params.dt
                pos += per
        X[T, foot] = pos
    return X, U


class _SlackedTranscription(Transcription):
    """Long-horizon transcription with an L1-penalized terminal slack.

    Decision vector ``(z, s+, s-)`` with ``x_T - x_goal = s+ - s-`` and
    ``s+, s- >= 0``.
    """

    def __init__(self, spec, w_slack):
        super().__init__(spec)
        self.w = w_slack
        self.base_nz = self.nz

    def problem(self):
        base = super().problem()
        n, nb = self.n, self.base_nz
        nz = nb + 2 * n
        T = self.N
        x_goal = self.spec.x_F
        w = self.w

        def zb(z):
            return z[:nb]

        def eq(z):
            X_T = z[T * n:(T + 1) * n]
            return np.concatenate([base.c_eq(zb(z)), X_T - x_goal - z[nb:nb + n] + z[nb + n:]])

        def eq_jac(z):
            Jb = base.j_eq(zb(z))
            top = np.hstack([Jb, np.zeros((Jb.shape[0], 2 * n))])
            bot = np.zeros((n, nz))
            bot[:, T * n:(T + 1) * n] = np.eye(n)
            bot[:, nb:nb + n] = -np.eye(n)
            bot[:, nb + n:] = np.eye(n)
            return np.vstack([top, bot])

        def ineq(z):
            return base.c_ineq(zb(z))

        def ineq_jac(z):
            Ji = base.j_ineq(zb(z))
            return np.hstack([Ji, np.zeros((Ji.shape[0], 2 * n))])

        def residual_jac(z):
            Jr = base.residual_jac(zb(z))
            return np.hstack([Jr, np.zeros((Jr.shape[0], 2 * n))])

        def lagrangian_hessian(z, lam_eq, lam_in):
            H = np.zeros((nz, nz))
            H[:nb, :nb] = base.lagrangian_hessian(zb(z), lam_eq[:lam_eq.size - n], lam_in)
            return H

        from .nlp import NlpProblem
        return NlpProblem(
            n=nz,
            objective=lambda z: base.objective(zb(z)) + w * np.sum(z[nb:]),
            gradient=lambda z: np.concatenate([base.gradient(zb(z)), np.full(2 * n, w)]),
            eq=eq, eq_jac=eq_jac, ineq=ineq, ineq_jac=ineq_jac,
            lb=np.concatenate([base.lb, np.zeros(2 * n)]),
            ub=np.concatenate([base.ub, np.full(2 * n, np.inf)]),
            residual=lambda z: base.residual(zb(z)),
            residual_jac=residual_jac,
            hessian_blocks=list(base.hessian_blocks) + [np.arange(nb, nz)],
            lagrangian_hessian=lagrangian_hessian,
        )


def generate_feasible_trajectory(system, regions, x_S, x_goal, cost=None, w_slack=1e3,
                                 options=None, retries=3, params=SlipParams()):
    """Solve one long-horizon problem through a fixed region sequence.

    The terminal constraint is softened by an L1-penalized slack. If the
    resulting trajectory misses the goal set, the solve is repeated with the
    slack weight doubled, up to ``retries`` times.

    Raises
    ------
    GenerationFailed
        If the region sequence is contradictory or the slack cannot be driven
        inside the goal set.
    """
    from .ftocp import FREE, PIN, FtocpSpec, solve_ftocp

    x_S = np.asarray(x_S, float)
    x_goal = np.asarray(x_goal, float)
    regions = [int(r) for r in regions]
    cost = make_slip_cost(x_goal) if cost is None else cost
    T = len(regions)
    if T == 0:
        if not system.in_goal(x_S):
            raise GenerationFailed("T = 0 but the start state is not in the goal set",
                                   "precondition")
        traj = Trajectory(x=x_S[None, :], u=np.zeros((0, system.d)), regions=[], q=None)
        cost_to_go(traj, cost)
        return traj
    reason = _contradiction(regions, x_S, x_goal)
    if reason is not None:
        raise GenerationFailed(reason, "contradiction")
    if not system.regions[regions[0]].contains(x_S):
        raise GenerationFailed(f"start state is not in region {REGION_NAMES[regions[0]]}",
                               "precondition")

    spec = FtocpSpec(system=system, cost=cost, x0=x_S, x_F=x_goal, q_F=0.0,
                     regions=regions, terminal=FREE)
    X0, U0 = _interpolated_guess(regions, x_S, x_goal, params)
    opts = options or SolverOptions(max_iter=500, hessian="exact")
    w = w_slack
    last = None
    for attempt in range(retries + 1):
        tr = _SlackedTranscription(spec, w)
        z0 = np.concatenate([tr.pack(X0, U0), np.zeros(2 * system.n)])
        d = X0[-1] - x_goal
        z0[tr.base_nz:tr.base_nz + system.n] = np.maximum(d, 0.0)
        z0[tr.base_nz + system.n:] = np.maximum(-d, 0.0)
        sol = solve(tr.problem(), z0, opts)
        log.info("generation attempt %d: status=%s iterations=%d w_slack=%g",
                 attempt, sol.status, sol.iterations, w)
        X, U = tr.split(sol.z[:tr.base_nz])
        last = sol
        if sol.ok:
            # the slacked optimum is a warm start for the hard terminal constraint
            pinned = solve_ftocp(replace(spec, terminal=PIN), warm_start=(X, U), options=opts)
            if pinned.ok:
                X, U = pinned.x, pinned.u
            traj = Trajectory(x=X.copy(), u=U.copy(), regions=regions)
            rep = check_feasible(system, traj, goal_center=x_goal)
            if rep.ok:
                cost_to_go(traj, cost)
                return traj
            log.info("generation attempt %d misses the goal: %s", attempt, rep.kinds())
        X0, U0 = X.copy(), U.copy()
        w *= 2.0
    raise GenerationFailed(f"could not reach the goal set (last status {last.status}, "
                           f"feasibility {last.feasibility:.2e})")


def default_params_for(dynamics=PHYSICAL, **kw):
    return replace(SlipParams(), dynamics=dynamics, **kw)
