"""Command-line entry point.

Subcommands ``generate``, ``run``, ``iterate``, ``sweep``, ``compare`` and
``oracle`` read an INI config; command-line flags override config values.

Exit codes: 0 success, 1 property failure, 2 usage or config error,
3 numerical failure.
"""

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import config as C
from .nlp import NumericFail
from .system import check_feasible, cost_to_go, load_trajectory_csv, save_trajectory_csv

EXIT_OK, EXIT_PROPERTY, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2, 3

log = logging.getLogger("piecewise_mpc")


class UsageError(Exception):
    pass


def _out_dir(cfg):
    d = Path(cfg["output"]["directory"])
    d.mkdir(parents=True, exist_ok=True)
    return d


def _write_json(path, doc):
    with open(path, "w") as fh:
        json.dump(doc, fh, indent=2, sort_keys=True, default=float)
        fh.write("\n")


def _report_doc(rep):
    return {"ok": rep.ok, "violations": [{"t": v.t, "kind": v.kind, "residual": v.residual}
                                         for v in rep.violations]}


def _stored(cfg, args, system, base_cost, x_S, x_goal, required=False):
    """Stored trajectory from --trajectory / [task] trajectory, else generated."""
    path = args.trajectory or cfg["task"]["trajectory"]
    if path:
        p = Path(path)
        if not p.is_file():
            raise UsageError(f"trajectory file not found: {p}")
        try:
            traj = load_trajectory_csv(p)
        except (OSError, ValueError) as err:
            raise UsageError(f"cannot read trajectory {p}: {err}") from None
        if traj.n != system.n or (traj.T and traj.d != system.d):
            raise UsageError(f"trajectory {p} does not match the {system.name} dimensions")
        return traj
    if required:
        raise UsageError("this command needs a trajectory file (--trajectory or [task] trajectory)")
    return C.generate_trajectory(cfg, system, base_cost, x_S, x_goal)


def _policy_setup(cfg, args, required_traj=False):
    system, base_cost, x_S, x_goal = C.build_system(cfg)
    stored = _stored(cfg, args, system, base_cost, x_S, x_goal, required_traj)
    center = stored.x[-1] if cfg["policy"]["cost"] == "min-time" else system.x_goal
    cost = C.policy_cost(cfg, system, base_cost, center)
    cost_to_go(stored, cost)
    if cfg["policy"]["N"] > max(stored.T, 1):
        log.info("capping N = %d at the stored length %d", cfg["policy"]["N"], stored.T)
        cfg = cfg.with_overrides({("policy", "N"): str(max(stored.T, 1))})
    return cfg, system, cost, stored, center


def _scenario(cfg, args, required_traj=False):
    cfg, system, cost, stored, _ = _policy_setup(cfg, args, required_traj)
    return C.build_scenario(cfg, system, cost, stored)


def cmd_generate(cfg, args):
    system, base_cost, x_S, x_goal = C.build_system(cfg)
    traj = C.generate_trajectory(cfg, system, base_cost, x_S, x_goal)
    out = _out_dir(cfg)
    save_trajectory_csv(traj, out / "trajectory.csv")
    rep = check_feasible(system, traj)
    _write_json(out / "feasibility.json", _report_doc(rep))
    log.info("wrote %s (T = %d, q0 = %.6g)", out / "trajectory.csv", traj.T, traj.q[0])
    return EXIT_OK if rep.ok else EXIT_PROPERTY


def cmd_run(cfg, args):
    from .policy import InfeasibleAtM0, PolicyState, run_closed_loop
    cfg, system, cost, stored, center = _policy_setup(cfg, args, required_traj=True)
    p, e = cfg["policy"], cfg["experiment"]
    ps = PolicyState(system, cost, stored, p["N"], p["M"], options=cfg.solver_options(),
                     mode=p["mode"], match_tol=p["match_tol"], shift_tol=p["shift_tol"])
    disturbance = None
    if e["disturbance"] is not None:
        w = np.asarray(e["disturbance"], float)
        if w.shape != (system.n,):
            raise C.ConfigError(f"[experiment] disturbance needs {system.n} entries")
        disturbance = {e["disturbance_step"]: w}
    out = _out_dir(cfg)
    with open(out / "steps.jsonl", "w") as fh:
        try:
            traj, steps = run_closed_loop(ps, stored.x[0], disturbance=disturbance,
                                          callback=lambda r: fh.write(json.dumps(r.log_record()) + "\n"))
        except InfeasibleAtM0 as err:
            log.error("%s", err)
            _write_json(out / "summary.json", {"reached": False, "failure": str(err), "t": err.t})
            return EXIT_PROPERTY
    save_trajectory_csv(traj, out / "closed_loop.csv")
    rep = check_feasible(system, traj, tol=1e-5, goal_center=center)
    skip = set() if disturbance is None else set(disturbance)
    violations = [v for v in rep.violations
                  if not (v.kind == "dynamics" and v.t in skip) and v.kind != "terminal"]
    reached = bool(system.in_goal(traj.x[-1], center))
    ms = [r.wall_ms for r in steps]
    _write_json(out / "summary.json", {
        "reached": reached, "constraints_ok": not violations, "q0": float(traj.q[0]),
        "stored_q0": float(stored.q[0]), "mean_step_ms": float(np.mean(ms)) if ms else None,
        "max_step_ms": float(np.max(ms)) if ms else None})
    log.info("closed loop: reached=%s constraints_ok=%s q0=%.6g", reached, not violations, traj.q[0])
    return EXIT_OK if reached and not violations else EXIT_PROPERTY


def cmd_iterate(cfg, args):
    from .iteration import iterate, write_summary_csv
    cfg, system, cost, stored, center = _policy_setup(cfg, args)
    p = cfg["policy"]
    out = _out_dir(cfg)

    def progress(rec):
        save_trajectory_csv(rec.traj, out / f"iteration_{rec.j:03d}.csv")
        log.info("iteration %d: q0 = %.6g, completion = %s", rec.j, rec.q0, rec.completion_time)

    records = iterate(system, cost, stored, p["M"], p["N"], cfg["experiment"]["iterations"],
                      options=cfg.solver_options(), mode=p["mode"], goal_center=center,
                      callback=progress)
    write_summary_csv(records, out / "summary.csv")
    q = [r.q0 for r in records]
    tol = 1e-6 * max(1.0, abs(q[0]))
    monotone = all(q[i - 1] >= q[i] - tol for i in range(1, len(q)))
    _write_json(out / "summary.json", {
        "monotone": monotone, "q0": q, "completion_time": [r.completion_time for r in records]})
    return EXIT_OK if monotone else EXIT_PROPERTY


def cmd_sweep(cfg, args):
    from .experiments import ic_sweep, write_outcomes_csv, write_summary_json
    scn = _scenario(cfg, args)
    outcomes = ic_sweep(scn)
    out = _out_dir(cfg)
    write_outcomes_csv(outcomes, out / "outcomes.csv", out / "timing.csv")
    n_ok = sum(o.ok for o in outcomes)
    doc = write_summary_json({"all_reach_goal": n_ok == len(outcomes)}, out / "summary.json",
                             {"reached": n_ok, "runs": len(outcomes)})
    return EXIT_OK if doc["passed"] else EXIT_PROPERTY


def cmd_compare(cfg, args):
    from .experiments import (calibrate_disturbance, disturbance_compare, write_outcomes_csv,
                              write_summary_json)
    scn = _scenario(cfg, args)
    if scn.disturbance is None:
        raise C.ConfigError("[experiment] disturbance is required for compare")
    e = cfg["experiment"]
    if e["calibrate"]:
        mag, res = calibrate_disturbance(scn, 0.0, e["calibrate_hi"], e["calibrate_iters"])
    else:
        mag, res = 1.0, disturbance_compare(scn, 1.0)
    out = _out_dir(cfg)
    write_outcomes_csv([res.proposed, res.baseline], out / "outcomes.csv", out / "timing.csv")
    doc = write_summary_json({"proposed_reaches_goal": res.proposed.ok}, out / "summary.json",
                             {"magnitude": mag, "baseline_ok": res.baseline.ok,
                              "separates": res.separates})
    return EXIT_OK if doc["passed"] else EXIT_PROPERTY


def cmd_oracle(cfg, args):
    from .experiments import oracle_compare, write_oracle_csv, write_summary_json
    if cfg.model != "synthetic-pwa":
        raise C.ConfigError("oracle runs on the synthetic-pwa model only")
    system, cost, _, _ = C.build_system(cfg)
    e = cfg["experiment"]
    rows = oracle_compare(system, cost, e["oracle_instances"], e["oracle_T"], e["oracle_box"],
                          e["seed"], e["oracle_N"], e["oracle_M"], cfg.solver_options())
    out = _out_dir(cfg)
    write_oracle_csv(rows, out / "oracle.csv")
    doc = write_summary_json({"oracle_bound": bool(rows) and all(r.ok() for r in rows)},
                             out / "summary.json", {"instances": len(rows)})
    return EXIT_OK if doc["passed"] else EXIT_PROPERTY


COMMANDS = {"generate": cmd_generate, "run": cmd_run, "iterate": cmd_iterate,
            "sweep": cmd_sweep, "compare": cmd_compare, "oracle": cmd_oracle}


def build_parser():
    ap = argparse.ArgumentParser(prog="piecewise-mpc", description=__doc__.split("\n")[0])
    ap.add_argument("command", choices=sorted(COMMANDS))
    ap.add_argument("-c", "--config", required=True, help="INI configuration file")
    ap.add_argument("-o", "--out", help="output directory (overrides [output] directory)")
    ap.add_argument("-t", "--trajectory", help="stored trajectory CSV")
    ap.add_argument("--seed", type=int, help="seed for randomized experiments")
    ap.add_argument("--N", type=int, help="initial horizon")
    ap.add_argument("--M", type=int, help="candidate count")
    ap.add_argument("--iterations", type=int, help="policy iterations")
    ap.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                    help="override any config entry (repeatable)")
    ap.add_argument("-v", "--verbose", action="store_true")
    return ap


def _overrides(args):
    ov = {}
    for item in args.set:
        lhs, sep, rhs = item.partition("=")
        sec, dot, key = lhs.strip().partition(".")
        if not sep or not dot:
            raise C.ConfigError(f"--set expects SECTION.KEY=VALUE, got {item!r}")
        ov[(sec, key)] = rhs
    for flag, target in (("out", ("output", "directory")), ("seed", ("experiment", "seed")),
                         ("N", ("policy", "N")), ("M", ("policy", "M")),
                         ("iterations", ("experiment", "iterations"))):
        val = getattr(args, flag)
        if val is not None:
            ov[target] = str(val)
    return ov


def main(argv=None):
    from .slip import GenerationFailed
    try:
        args = build_parser().parse_args(argv)
    except SystemExit as exc:
        return EXIT_OK if exc.code == 0 else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        cfg = C.load_config(args.config).with_overrides(_overrides(args))
        return COMMANDS[args.command](cfg, args)
    except (C.ConfigError, UsageError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_USAGE
    except GenerationFailed as err:
        print(f"error: trajectory generation failed: {err}", file=sys.stderr)
        return EXIT_NUMERIC if err.kind == "numerical" else EXIT_USAGE
    except NumericFail as err:
        print(f"error: numerical failure: {err}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
