"""Experiment harnesses: perturbed starts, disturbance comparison, brute-force oracle."""

import csv
import itertools
import json
import time
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence

import numpy as np

from .ftocp import FREE, GOAL, FtocpSpec, solve_ftocp
from .nlp import NumericFail, SolverOptions
from .policy import EARLY_STOP, InfeasibleAtM0, PolicyState, run_closed_loop
from .system import NoRegion, Trajectory, check_feasible, cost_to_go, quadratic_cost


class AllInfeasible(Exception):
    """No region sequence admits a solution."""


def _weights(w, default, size, name):
    """Diagonal weights of length ``size``; a single value is broadcast."""
    w = np.full(size, default) if w is None else np.atleast_1d(np.asarray(w, float))
    if w.size == 1:
        w = np.full(size, w[0])
    if w.shape != (size,):
        raise ValueError(f"{name} needs 1 or {size} entries, got {w.size}")
    return w


@dataclass
class Scenario:
    """A built experiment: system, cost, stored trajectory and policy settings.

    ``perturb_components`` selects which state entries the initial-condition
    sweep perturbs (all when None). ``disturbance`` is the additive state
    vector injected after step ``disturbance_step``.
    """

    name: str
    system: object
    cost: object
    stored: Trajectory
    N: int
    M: int = 1
    x_S: Optional[np.ndarray] = None
    options: SolverOptions = field(default_factory=lambda: SolverOptions(hessian="exact"))
    mode: str = EARLY_STOP
    perturb_count: int = 10
    perturb_magnitude: float = 0.0
    perturb_seed: int = 0
    perturb_components: Optional[Sequence[int]] = None
    disturbance_step: int = 0
    disturbance: Optional[np.ndarray] = None
    tracking_Q: Optional[np.ndarray] = None
    tracking_R: Optional[np.ndarray] = None
    iterations: int = 1

    def __post_init__(self):
        self.x_S = self.stored.x[0].copy() if self.x_S is None else np.asarray(self.x_S, float)
        if self.stored.q is None:
            cost_to_go(self.stored, self.cost)
        n, d = self.system.n, self.system.d
        self.tracking_Q = _weights(self.tracking_Q, 1.0, n, "tracking_Q")
        self.tracking_R = _weights(self.tracking_R, 0.1, d, "tracking_R")
        if not np.all(np.isfinite(self.x_S)) or not np.isfinite(self.perturb_magnitude):
            raise ValueError("scenario magnitudes must be finite")

    @property
    def T(self):
        return self.stored.T

    def policy(self, M=None):
        return PolicyState(self.system, self.cost, self.stored, self.N,
                           self.M if M is None else M, options=self.options, mode=self.mode)


@dataclass
class RunOutcome:
    """Summary of one closed-loop run."""

    run: int
    controller: str
    reached: bool
    failure: str = ""
    fail_step: Optional[int] = None
    max_violation: float = 0.0
    max_deviation: float = float("nan")
    cost: float = float("nan")
    steps: int = 0
    mean_solve_ms: float = float("nan")
    max_solve_ms: float = float("nan")
    wall_s: float = 0.0

    @property
    def ok(self):
        return self.reached and not self.failure and self.max_violation <= 1e-5


TIMING_COLUMNS = ["mean_solve_ms", "max_solve_ms", "wall_s"]
OUTCOME_COLUMNS = [f.name for f in RunOutcome.__dataclass_fields__.values()
                   if f.name not in TIMING_COLUMNS]


def _violation(system, traj, skip_dynamics=()):
    rep = check_feasible(system, traj, tol=1e-9)
    vals = [v.residual for v in rep.violations
            if v.kind != "terminal" and not (v.kind == "dynamics" and v.t in skip_dynamics)]
    return float(max(vals, default=0.0))


def _outcome(run, controller, system, traj, log_ms, stored=None, skip=(), wall=0.0):
    dev = float("nan")
    if stored is not None:
        k = min(traj.T, stored.T) + 1
        dev = float(np.max(np.abs(traj.x[:k] - stored.x[:k])))
    ms = np.asarray(log_ms, float)
    return RunOutcome(run, controller, bool(system.in_goal(traj.x[-1])), "", None,
                      _violation(system, traj, skip), dev, float(traj.q[0]), traj.T,
                      float(ms.mean()) if ms.size else float("nan"),
                      float(ms.max()) if ms.size else float("nan"), wall)


def _failed(run, controller, err, t, wall):
    return RunOutcome(run, controller, False, f"{type(err).__name__}: {err}", t, wall_s=wall)


def ic_sweep(scn: Scenario, seed=None) -> List[RunOutcome]:
    """Closed loops (M = 1) from ``x_S + eta`` with seeded ``|eta|_inf <= magnitude``.

    Failures are recorded as outcomes; the sweep always completes.
    """
    rng = np.random.default_rng(scn.perturb_seed if seed is None else seed)
    comps = (np.arange(scn.system.n) if scn.perturb_components is None
             else np.asarray(scn.perturb_components, int))
    outcomes = []
    for k in range(scn.perturb_count):
        eta = np.zeros(scn.system.n)
        eta[comps] = rng.uniform(-scn.perturb_magnitude, scn.perturb_magnitude, comps.size)
        start = time.perf_counter()
        try:
            traj, log = run_closed_loop(scn.policy(M=1), scn.x_S + eta)
        except (InfeasibleAtM0, NoRegion, NumericFail) as err:
            outcomes.append(_failed(k, "proposed", err, getattr(err, "t", None),
                                    time.perf_counter() - start))
            continue
        outcomes.append(_outcome(k, "proposed", scn.system, traj, [r.wall_ms for r in log],
                                 wall=time.perf_counter() - start))
    return outcomes


def run_tracking(system, stored, N, Q, R, x_init, disturbance=None, disturbance_step=None,
                 options=None, report_cost=None):
    """Tracking MPC baseline without terminal constraint.

    At time t it minimizes ``sum_k |x_k - x0_{t+k}|_Q^2 + |u_k - u0_{t+k}|_R^2`` over
    ``min(N, T - t)`` steps, with the region sequence copied from the stored
    trajectory, and applies the first input.

    Returns
    -------
    traj : Trajectory
        Realized trajectory, truncated at the first failed solve.
    solve_ms : list of float
    failure : str
        Empty on success.

    ``report_cost`` sets the stage cost used for the realized cost-to-go.
    """
    options = options or SolverOptions(hessian="exact")
    T = stored.T
    x = np.asarray(x_init, float)
    X, U, I, ms, failure = [x], [], [], [], ""
    costs = [quadratic_cost(Q, R, stored.x[t], stored.u[t]) for t in range(T)]
    warm = None
    for t in range(T):
        H = min(N, T - t)
        spec = FtocpSpec(system, costs[t:t + H], x, None, 0.0, stored.regions[t:t + H],
                         terminal=FREE)
        if warm is None or warm[0].shape[0] != H + 1:
            warm = (stored.x[t:t + H + 1].copy(), stored.u[t:t + H].copy())
        warm[0][0] = x
        t0 = time.perf_counter()
        try:
            sol = solve_ftocp(spec, warm_start=warm, options=options)
        except NumericFail as err:
            failure = f"NumericFail at t = {t}: {err}"
            break
        ms.append((time.perf_counter() - t0) * 1e3)
        if not sol.ok:
            failure = f"{sol.status} at t = {t}"
            break
        u = sol.u[0]
        try:
            i = system.get_region(x)
        except NoRegion as err:
            failure = f"NoRegion at t = {t}"
            break
        x = system.step(x, u, i)
        if disturbance is not None and t == disturbance_step:
            x = x + disturbance
        X.append(x)
        U.append(u)
        I.append(i)
        nxt_H = min(N, T - t - 1)
        if nxt_H > 0:
            Xw = np.vstack([sol.x[1:], stored.x[t + H][None]])[:nxt_H + 1]
            Uw = np.vstack([sol.u[1:], stored.u[min(t + H, T - 1)][None]])[:nxt_H]
            warm = (Xw, Uw)
    traj = Trajectory(np.array(X), np.array(U).reshape(len(U), system.d), I)
    cost_to_go(traj, report_cost or quadratic_cost(Q, R, np.zeros(system.n)))
    return traj, ms, failure


@dataclass
class CompareOutcome:
    magnitude: float
    proposed: RunOutcome
    baseline: RunOutcome

    @property
    def separates(self):
        """Proposed succeeds while the baseline misses the goal or violates constraints."""
        return self.proposed.ok and not self.baseline.ok


def disturbance_compare(scn: Scenario, magnitude=1.0) -> CompareOutcome:
    """Inject ``magnitude * scn.disturbance`` after ``scn.disturbance_step`` into both loops."""
    w = np.zeros(scn.system.n) if scn.disturbance is None else magnitude * np.asarray(scn.disturbance, float)
    step = scn.disturbance_step
    skip = (step,)

    start = time.perf_counter()
    try:
        traj, log = run_closed_loop(scn.policy(), scn.x_S, disturbance={step: w})
        prop = _outcome(0, "proposed", scn.system, traj, [r.wall_ms for r in log], scn.stored,
                        skip, time.perf_counter() - start)
    except (InfeasibleAtM0, NoRegion, NumericFail) as err:
        prop = _failed(0, "proposed", err, getattr(err, "t", None), time.perf_counter() - start)

    start = time.perf_counter()
    traj, ms, failure = run_tracking(scn.system, scn.stored, scn.N, scn.tracking_Q, scn.tracking_R,
                                     scn.x_S, w, step, scn.options, scn.cost)
    base = _outcome(0, "tracking", scn.system, traj, ms, scn.stored, skip,
                    time.perf_counter() - start)
    if failure:
        base.failure = failure
        base.reached = False
    return CompareOutcome(float(magnitude), prop, base)


def calibrate_disturbance(scn: Scenario, lo=0.0, hi=1.0, iters=10):
    """Bisection on the magnitude multiplying ``scn.disturbance``.

    Finds the smallest tested magnitude at which the tracking baseline fails,
    assuming it succeeds at ``lo`` and fails at ``hi``.

    Returns
    -------
    magnitude : float
        Upper end of the final bracket (baseline fails there).
    outcome : CompareOutcome
        Both controllers at that magnitude.
    """
    out_hi = disturbance_compare(scn, hi)
    if out_hi.baseline.ok:
        raise ValueError("the baseline still succeeds at the upper bracket")
    for _ in range(iters):
        mid = 0.5 * (lo + hi)
        out = disturbance_compare(scn, mid)
        if out.baseline.ok:
            lo = mid
        else:
            hi, out_hi = mid, out
    return hi, out_hi


@dataclass
class OracleResult:
    cost: float
    regions: tuple
    X: np.ndarray
    U: np.ndarray
    solved: int
    enumerated: int


def mip_oracle(system, cost, x_I, T_small, options=None, max_sequences=10_000) -> OracleResult:
    """Brute-force minimum over all region sequences of length ``T_small``.

    Each sequence gives a fixed-sequence problem ending in the goal set; the
    cheapest solution wins (ties keep the lexicographically first sequence).

    Raises
    ------
    AllInfeasible
        If no sequence admits a solution.
    """
    x_I = np.asarray(x_I, float)
    R = system.R
    if R ** T_small > max_sequences:
        raise ValueError(f"{R}^{T_small} sequences exceed the enumeration limit")
    if T_small == 0:
        if not system.in_goal(x_I):
            raise AllInfeasible("T = 0 and the start is outside the goal set")
        return OracleResult(0.0, (), x_I[None], np.zeros((0, system.d)), 0, 1)
    options = options or SolverOptions(hessian="exact")
    best = None
    solved = enumerated = 0
    for seq in itertools.product(range(R), repeat=T_small):
        enumerated += 1
        if system.regions[seq[0]].violation(x_I) > 0:
            continue
        spec = FtocpSpec(system, cost, x_I, system.x_goal, 0.0, seq, terminal=GOAL)
        try:
            sol = solve_ftocp(spec, options=options)
        except NumericFail:
            continue
        if not sol.ok:
            continue
        solved += 1
        if best is None or sol.cost < best.cost:
            best = OracleResult(sol.cost, tuple(seq), sol.x, sol.u, 0, 0)
    if best is None:
        raise AllInfeasible(f"none of the {enumerated} sequences is feasible")
    best.solved, best.enumerated = solved, enumerated
    return best


def oracle_instances(system, cost, count, T_small, box, seed, max_draws=1000):
    """Seeded start states in ``[-box, box]^n`` with trajectories to the goal.

    Each stored trajectory is optimal for its own region sequence. Draws for
    which no such trajectory is found are skipped.
    """
    from .pwa import optimal_pwa_trajectory
    rng = np.random.default_rng(seed)
    found = []
    for _ in range(max_draws):
        if len(found) == count:
            break
        x = rng.uniform(-box, box, system.n)
        try:
            found.append((x, optimal_pwa_trajectory(system, x, T_small, cost)))
        except RuntimeError:
            continue
    return found


@dataclass
class OracleRow:
    """Oracle, closed-loop and stored costs for one start state."""

    instance: int
    x: np.ndarray
    oracle_cost: float
    closed_loop_cost: float
    stored_cost: float

    def ok(self, rel_tol=1e-6):
        tol = rel_tol * max(1.0, self.stored_cost)
        return (self.oracle_cost <= self.closed_loop_cost + tol
                and self.closed_loop_cost <= self.stored_cost + tol)


def oracle_compare(system, cost, count=20, T_small=6, box=0.2, seed=1, N=3, M=2,
                   options=None) -> List[OracleRow]:
    """Check ``oracle cost <= closed-loop cost <= stored cost`` on seeded instances.

    An instance without any feasible sequence gets ``oracle_cost = inf`` and
    fails the check.
    """
    options = options or SolverOptions(hessian="exact")
    rows = []
    for k, (x, stored) in enumerate(oracle_instances(system, cost, count, T_small, box, seed)):
        try:
            orc = mip_oracle(system, cost, x, T_small, options).cost
        except AllInfeasible:
            orc = np.inf
        ps = PolicyState(system, cost, stored, min(N, stored.T), M, options=options)
        traj, _ = run_closed_loop(ps, x)
        rows.append(OracleRow(k, x, float(orc), float(traj.q[0]), float(stored.q[0])))
    return rows


def write_oracle_csv(rows, path):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        n = rows[0].x.size if rows else 0
        w.writerow(["instance"] + [f"x{i}" for i in range(n)]
                   + ["oracle_cost", "closed_loop_cost", "stored_cost", "ok"])
        for r in rows:
            w.writerow([r.instance, *(repr(float(v)) for v in r.x), repr(r.oracle_cost),
                        repr(r.closed_loop_cost), repr(r.stored_cost), r.ok()])


def _write_rows(outcomes, path, columns):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(columns)
        for o in outcomes:
            row = asdict(o)
            w.writerow(["" if v is None else (repr(v) if isinstance(v, float) else v)
                        for v in (row[c] for c in columns)])


def write_outcomes_csv(outcomes, path, timing_path=None):
    """Outcome rows without wall-clock columns, so seeded runs give identical files.

    Timing columns go to ``timing_path`` when given.
    """
    _write_rows(outcomes, path, OUTCOME_COLUMNS)
    if timing_path is not None:
        _write_rows(outcomes, timing_path, ["run", "controller"] + TIMING_COLUMNS)


def write_summary_json(checks: dict, path, extra=None):
    """``{"checks": {name: bool}, "passed": bool, ...extra}``."""
    doc = {"checks": {k: bool(v) for k, v in checks.items()}, "passed": all(checks.values())}
    if extra:
        doc.update(extra)
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")
    return doc
