import json

import numpy as np
import pytest

from piecewise_mpc.experiments import (OUTCOME_COLUMNS, AllInfeasible, Scenario, disturbance_compare,
                                       ic_sweep, mip_oracle, oracle_compare, write_outcomes_csv,
                                       write_summary_json)
from piecewise_mpc.nlp import SolverOptions
from piecewise_mpc.policy import PolicyState, run_closed_loop
from piecewise_mpc.pwa import optimal_pwa_trajectory, pwa_cost

EXACT = SolverOptions(hessian="exact")
FAST = SolverOptions(hessian="exact", max_iter=50, max_restoration_iter=20)


def pwa_scenario(pwa, stored, **kw):
    system, cost = pwa
    base = dict(name="pwa", system=system, cost=cost, stored=stored, N=4, M=1, options=FAST,
                perturb_count=3, perturb_seed=7, disturbance=np.array([0.0, 1.0]),
                disturbance_step=10)
    base.update(kw)
    return Scenario(**base)


def test_zero_magnitude_sweep_repeats_the_nominal_run(pwa, pwa_stored):
    scn = pwa_scenario(pwa, pwa_stored, perturb_magnitude=0.0)
    outcomes = ic_sweep(scn)
    assert len(outcomes) == 3 and all(o.ok for o in outcomes)
    assert len({o.cost for o in outcomes}) == 1
    nominal, _ = run_closed_loop(scn.policy(M=1), scn.x_S)
    assert outcomes[0].cost == nominal.q[0]


def test_small_perturbations_reach_the_goal(pwa, pwa_stored):
    scn = pwa_scenario(pwa, pwa_stored, perturb_magnitude=1e-3, perturb_count=5)
    assert all(o.ok for o in ic_sweep(scn))


def test_oversized_perturbation_is_reported_not_raised(pwa, pwa_stored):
    scn = pwa_scenario(pwa, pwa_stored, perturb_magnitude=2.0, perturb_count=3)
    outcomes = ic_sweep(scn)
    assert len(outcomes) == 3
    failed = [o for o in outcomes if not o.ok]
    assert failed and all(o.failure for o in failed)
    assert any(o.failure.startswith("InfeasibleAtM0") and o.fail_step == 0 for o in failed)


def test_sweep_csv_is_reproducible(tmp_path, pwa, pwa_stored):
    scn = pwa_scenario(pwa, pwa_stored, perturb_magnitude=1e-3)
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    write_outcomes_csv(ic_sweep(scn), a, tmp_path / "timing.csv")
    write_outcomes_csv(ic_sweep(scn), b)
    assert a.read_bytes() == b.read_bytes()
    assert a.read_text().splitlines()[0].split(",") == OUTCOME_COLUMNS


def test_zero_disturbance_both_controllers_reach(pwa, pwa_stored):
    res = disturbance_compare(pwa_scenario(pwa, pwa_stored), magnitude=0.0)
    assert res.proposed.ok and res.baseline.ok
    assert not res.separates


def test_late_small_disturbance_stays_in_goal_basin(pwa, pwa_stored):
    scn = pwa_scenario(pwa, pwa_stored, disturbance_step=pwa_stored.T - 1)
    res = disturbance_compare(scn, magnitude=1e-4)
    assert res.proposed.reached and res.baseline.reached


def test_scenario_validation(pwa, pwa_stored):
    with pytest.raises(ValueError):
        pwa_scenario(pwa, pwa_stored, perturb_magnitude=np.inf)
    with pytest.raises(ValueError):
        pwa_scenario(pwa, pwa_stored, tracking_Q=np.ones(3))
    scn = pwa_scenario(pwa, pwa_stored, tracking_R=0.5)
    np.testing.assert_array_equal(scn.tracking_R, [0.5])


def test_oracle_single_region_is_one_solve():
    # a one-region system: the enumeration has a single sequence
    from piecewise_mpc.system import PiecewiseSystem, Region
    A = np.array([[1.0, 0.1], [0.0, 1.0]])
    B = np.array([[0.0], [0.1]])
    system = PiecewiseSystem(2, 1, [Region("all")], [lambda x, u: A @ x + B @ u],
                             [lambda x, u: (A, B)], input_lb=[-5.0], input_ub=[5.0],
                             x_goal=np.zeros(2))
    res = mip_oracle(system, pwa_cost(), np.array([0.1, 0.0]), 6, EXACT)
    assert res.enumerated == 1 and res.solved == 1


def test_oracle_at_goal_costs_nothing(pwa):
    system, cost = pwa
    assert mip_oracle(system, cost, np.zeros(2), 3, EXACT).cost == pytest.approx(0.0, abs=1e-12)


def test_oracle_lower_bounds_the_closed_loop(pwa):
    system, cost = pwa
    x_I = np.array([0.15, -0.1])
    res = mip_oracle(system, cost, x_I, 6, EXACT)
    assert res.enumerated == 64
    stored = optimal_pwa_trajectory(system, x_I, 6, cost)
    traj, _ = run_closed_loop(PolicyState(system, cost, stored, 3, 2, options=EXACT), x_I)
    assert res.cost <= traj.q[0] + 1e-9 <= stored.q[0] + 2e-9


def test_oracle_reports_all_infeasible(pwa):
    system, cost = pwa
    with pytest.raises(AllInfeasible):
        mip_oracle(system, cost, np.array([4.9, 2.0]), 3, FAST)
    with pytest.raises(ValueError):
        mip_oracle(system, cost, np.zeros(2), 20)


def test_oracle_compare_small_batch(pwa):
    system, cost = pwa
    rows = oracle_compare(system, cost, count=3, T_small=4, seed=3, options=EXACT)
    assert len(rows) == 3 and all(r.ok() for r in rows)


def test_summary_json_shape(tmp_path):
    doc = write_summary_json({"a": True, "b": False}, tmp_path / "s.json", {"runs": 2})
    assert doc == {"checks": {"a": True, "b": False}, "passed": False, "runs": 2}
    assert json.loads((tmp_path / "s.json").read_text()) == doc

