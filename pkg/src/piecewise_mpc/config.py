"""INI run configurations: parsing, validation and scenario construction.

Every key is declared in :data:`SCHEMA`; unknown sections or keys are errors,
and all values are parsed before anything is solved.
"""

import configparser
import re
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict

import numpy as np

from .nlp import SolverOptions


class ConfigError(ValueError):
    """Malformed, unknown or inconsistent configuration entry."""


def _floats(text):
    try:
        return np.array([float(v) for v in text.replace(";", ",").split(",") if v.strip()])
    except ValueError:
        raise ConfigError(f"expected comma-separated numbers, got {text!r}") from None


def _ints(text):
    try:
        return tuple(int(v) for v in text.split(",") if v.strip())
    except ValueError:
        raise ConfigError(f"expected comma-separated integers, got {text!r}") from None


def _bool(text):
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ConfigError(f"expected a boolean, got {text!r}")


_REST = re.compile(r"^\s*rest\(\s*([^,\s]+)\s*(?:,\s*([^,\s]+)\s*)?(?:,\s*([^,\s]+)\s*)?\)\s*$")


def _state(text):
    """A state vector, or ``rest(px[, half_stance[, delta]])`` for SLIP rest stances."""
    m = _REST.match(text)
    if m:
        try:
            return ("rest",) + tuple(float(g) for g in m.groups() if g is not None)
        except ValueError:
            raise ConfigError(f"bad rest stance {text!r}") from None
    return _floats(text)


def _choice(*options):
    def parse(text):
        t = text.strip().lower()
        if t not in options:
            raise ConfigError(f"expected one of {options}, got {text!r}")
        return t
    return parse


SCHEMA = {
    "system": {
        "model": (_choice("slip", "synthetic-pwa"), "slip"),
        "dynamics": (_choice("physical", "paper-literal"), "physical"),
        "l0": (float, 0.55), "l_max": (float, 0.2), "delta0": (float, 100.0),
        "m": (float, 1.0), "g": (float, 9.81), "dt": (float, None),
        "delta_max": (float, 10.0), "vz_max": (float, 10.0), "py_min": (float, 0.1),
        "damping": (_floats, None), "x_max": (_floats, None), "u_max": (float, 5.0),
        "q": (_floats, None), "r": (float, 0.1),
    },
    "task": {
        "x_start": (_state, None), "x_goal": (_state, None), "gait": (str, ""),
        "T": (int, None), "eps_goal": (float, 1e-3), "w_slack": (float, 1e3),
        "pd_gains": (_floats, None), "trajectory": (str, ""),
    },
    "policy": {
        "N": (int, 30), "M": (int, 1), "mode": (_choice("early-stop", "exhaustive"), "early-stop"),
        "match_tol": (float, 1e-6), "shift_tol": (float, 1e-5),
        "cost": (_choice("nominal", "min-time"), "nominal"), "min_time_weight": (float, 1e-4),
    },
    "solver": {
        "tol_kkt": (float, 1e-6), "tol_feas": (float, 1e-6), "max_iter": (int, 200),
        "hessian": (_choice("bfgs", "gauss-newton", "exact"), "exact"),
        "max_restoration_iter": (int, 100),
    },
    "experiment": {
        "kind": (_choice("generate", "run", "iterate", "ic-sweep", "disturbance",
                         "oracle-compare"), "run"),
        "iterations": (int, 1), "seed": (int, 0),
        "perturb_count": (int, 10), "perturb_magnitude": (float, 0.0),
        "perturb_components": (_ints, None),
        "disturbance_step": (int, 0), "disturbance": (_floats, None),
        "calibrate": (_bool, False), "calibrate_hi": (float, 1.0), "calibrate_iters": (int, 10),
        "tracking_q": (_floats, None), "tracking_r": (_floats, None),
        "oracle_instances": (int, 20), "oracle_T": (int, 6), "oracle_box": (float, 0.2),
        "oracle_N": (int, 3), "oracle_M": (int, 2),
    },
    "output": {
        "directory": (str, "out"), "formats": (str, "csv,json"),
    },
}


@dataclass
class RunConfig:
    """Parsed configuration: ``sections[name][key]`` holds typed values."""

    sections: Dict[str, dict] = field(default_factory=dict)
    source: str = ""

    def __getitem__(self, section):
        return self.sections[section]

    def get(self, section, key):
        return self.sections[section][key]

    def with_overrides(self, overrides):
        """Copy with ``{(section, key): raw_text}`` entries parsed and applied."""
        out = RunConfig({s: dict(v) for s, v in self.sections.items()}, self.source)
        for (sec, key), raw in overrides.items():
            out.sections[sec][key] = _parse_value(sec, key, str(raw))
        _validate(out)
        return out

    @property
    def model(self):
        return self.sections["system"]["model"]

    def solver_options(self):
        s = self.sections["solver"]
        return SolverOptions(tol_kkt=s["tol_kkt"], tol_feas=s["tol_feas"], max_iter=s["max_iter"],
                             hessian=s["hessian"], max_restoration_iter=s["max_restoration_iter"])


def _parse_value(section, key, raw):
    if section not in SCHEMA:
        raise ConfigError(f"unknown section [{section}]")
    if key not in SCHEMA[section]:
        raise ConfigError(f"unknown key {key!r} in [{section}]")
    parser, _ = SCHEMA[section][key]
    try:
        return parser(raw.strip())
    except ConfigError as err:
        raise ConfigError(f"[{section}] {key}: {err}") from None
    except ValueError:
        raise ConfigError(f"[{section}] {key}: cannot parse {raw!r}") from None


def _validate(cfg):
    p, t = cfg["policy"], cfg["task"]
    if p["N"] < 1 or p["M"] < 1:
        raise ConfigError("[policy] N and M must be at least 1")
    if t["eps_goal"] <= 0:
        raise ConfigError("[task] eps_goal must be positive")
    if t["T"] is not None and t["T"] < 0:
        raise ConfigError("[task] T must be non-negative")
    e = cfg["experiment"]
    if e["perturb_magnitude"] < 0 or not np.isfinite(e["perturb_magnitude"]):
        raise ConfigError("[experiment] perturb_magnitude must be finite and non-negative")
    if cfg.model == "slip" and t["x_goal"] is None:
        raise ConfigError("[task] x_goal is required for the slip model")


def parse_config(text, source="<string>"):
    """Parse INI text into a validated :class:`RunConfig`.

    Raises
    ------
    ConfigError
    """
    cp = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    cp.optionxform = str
    try:
        cp.read_string(text, source=source)
    except configparser.Error as err:
        raise ConfigError(str(err)) from None
    sections = {}
    for sec in cp.sections():
        if sec not in SCHEMA:
            raise ConfigError(f"unknown section [{sec}]")
    for sec, keys in SCHEMA.items():
        vals = {k: default for k, (_, default) in keys.items()}
        if cp.has_section(sec):
            for key, raw in cp.items(sec):
                vals[key] = _parse_value(sec, key, raw)
        sections[sec] = vals
    cfg = RunConfig(sections, source)
    _validate(cfg)
    return cfg


def load_config(path):
    """Read and validate a config file (UTF-8)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as err:
        raise ConfigError(f"cannot read config {path}: {err}") from None
    return parse_config(text, str(path))


# ---------------------------------------------------------------------------
# building systems, costs and trajectories


def slip_params(cfg):
    from .slip import SlipParams
    s = cfg["system"]
    kw = {k: s[k] for k in ("l0", "l_max", "delta0", "m", "g", "delta_max", "vz_max", "py_min")}
    if s["dt"] is not None:
        kw["dt"] = s["dt"]
    try:
        return SlipParams(dynamics=s["dynamics"], **kw)
    except ValueError as err:
        raise ConfigError(f"[system] {err}") from None


def pwa_params(cfg):
    from .pwa import PwaParams
    s = cfg["system"]
    p = PwaParams()
    kw = {}
    if s["dt"] is not None:
        kw["dt"] = s["dt"]
    if s["damping"] is not None:
        kw["damping"] = tuple(s["damping"])
    if s["x_max"] is not None:
        kw["x_max"] = tuple(s["x_max"])
    if s["q"] is not None:
        kw["q"] = tuple(s["q"])
    kw["u_max"] = s["u_max"]
    kw["r"] = s["r"]
    return replace(p, **kw)


def resolve_state(cfg, value, what):
    if value is None:
        raise ConfigError(f"[task] {what} is required")
    if isinstance(value, tuple) and value and value[0] == "rest":
        if cfg.model != "slip":
            raise ConfigError(f"[task] {what}: rest(...) is only defined for the slip model")
        from .slip import rest_state
        args = value[1:]
        try:
            return rest_state(args[0], *(args[1:2]), params=slip_params(cfg),
                              **({"delta": args[2]} if len(args) > 2 else {}))
        except ValueError as err:
            raise ConfigError(f"[task] {what}: {err}") from None
    n = 8 if cfg.model == "slip" else 2
    value = np.asarray(value, float)
    if value.shape != (n,):
        raise ConfigError(f"[task] {what} must have {n} entries, got {value.size}")
    return value


def build_system(cfg):
    """``(system, base_cost, x_S, x_goal)`` for the configured model."""
    t = cfg["task"]
    if cfg.model == "slip":
        from .slip import make_slip_cost, make_slip_system
        params = slip_params(cfg)
        x_goal = resolve_state(cfg, t["x_goal"], "x_goal")
        x_S = resolve_state(cfg, t["x_start"], "x_start")
        system = make_slip_system(x_goal, t["eps_goal"], params)
        return system, make_slip_cost(x_goal), x_S, x_goal
    from .pwa import make_pwa_system, pwa_cost
    params = pwa_params(cfg)
    system = make_pwa_system(params, t["eps_goal"])
    x_S = resolve_state(cfg, t["x_start"], "x_start")
    return system, pwa_cost(params), x_S, system.x_goal


def policy_cost(cfg, system, base_cost, goal_center):
    """The stage cost the policy optimizes (nominal or min-time)."""
    p = cfg["policy"]
    if p["cost"] == "min-time":
        from .iteration import min_time_cost
        return min_time_cost(base_cost, goal_center, system.eps_goal, p["min_time_weight"])
    return base_cost


def build_scenario(cfg, system, cost, stored):
    """Experiment scenario from the [policy], [solver] and [experiment] sections."""
    from .experiments import Scenario
    e, p = cfg["experiment"], cfg["policy"]
    try:
        return Scenario(
            name=Path(cfg.source).stem or "scenario", system=system, cost=cost, stored=stored,
            N=min(p["N"], max(stored.T, 1)), M=p["M"], options=cfg.solver_options(),
            mode=p["mode"], perturb_count=e["perturb_count"],
            perturb_magnitude=e["perturb_magnitude"], perturb_seed=e["seed"],
            perturb_components=e["perturb_components"], disturbance_step=e["disturbance_step"],
            disturbance=e["disturbance"], tracking_Q=e["tracking_q"], tracking_R=e["tracking_r"],
            iterations=e["iterations"])
    except ValueError as err:
        raise ConfigError(f"[experiment] {err}") from None


def region_sequence(cfg):
    from .slip import gait_sequence
    try:
        return gait_sequence(cfg["task"]["gait"])
    except ValueError as err:
        raise ConfigError(f"[task] gait: {err}") from None


def generate_trajectory(cfg, system, base_cost, x_S, x_goal):
    """Initial feasible trajectory for the configured task.

    Raises
    ------
    GenerationFailed
    """
    t = cfg["task"]
    if cfg.model == "slip":
        from .slip import generate_feasible_trajectory
        return generate_feasible_trajectory(system, region_sequence(cfg), x_S, x_goal,
                                            cost=base_cost, w_slack=t["w_slack"],
                                            params=slip_params(cfg))
    from .pwa import generate_pwa_trajectory
    from .slip import GenerationFailed
    if t["T"] is None:
        raise ConfigError("[task] T is required for the synthetic-pwa model")
    gains = (3.0, 1.5) if t["pd_gains"] is None else tuple(t["pd_gains"])
    try:
        return generate_pwa_trajectory(system, x_S, t["T"], base_cost, gains=gains)
    except ValueError as err:
        raise GenerationFailed(str(err), kind="precondition") from None
    except RuntimeError as err:
        raise GenerationFailed(str(err)) from None
