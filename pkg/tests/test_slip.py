import numpy as np
import pytest

from piecewise_mpc.nlp.derivatives import _fd_jacobian
from piecewise_mpc.slip import (CONTACTS, DS, LEFT, PAPER_LITERAL, RIGHT, GenerationFailed,
                                SlipParams, equilibrium_delta, gait_sequence,
                                generate_feasible_trajectory, leg_angle, leg_compression,
                                make_slip_cost, make_slip_system, rest_state, slip_dynamics,
                                slip_dynamics_hess, slip_dynamics_jac, slip_stage_cost)
from piecewise_mpc.system import NoRegion, check_feasible

P = SlipParams()

# [DERIVED] upper root of 2 delta0 (l0 - d) p_y / d = m g with d = hypot(0.15, p_y),
# found with an independent root finder
REST_HEIGHT_015 = 0.47546717912038466


def state(px=0.0, py=0.5, vx=0.0, vy=0.0, zxl=-0.1, zxr=0.1, zyl=0.0, zyr=0.0):
    return np.array([px, py, vx, vy, zxl, zxr, zyl, zyr], float)


# ---------------------------------------------------------------------------
# leg geometry


def test_leg_angle_examples():
    assert leg_angle(state(px=0.3, zxl=0.3), "l") == 0.0
    assert leg_angle(state(px=0.4, py=0.3, zxr=0.1), "r") == pytest.approx(np.pi / 4, abs=1e-15)


def test_leg_compression_examples():
    assert leg_compression(state(py=P.l0, zxl=0.0), "l") == pytest.approx(0.0, abs=1e-15)
    assert leg_compression(state(py=0.5, zxr=0.0), "r") == pytest.approx(0.05, abs=1e-15)


def test_leg_geometry_matches_scalar_formulas():
    rng = np.random.default_rng(0)
    for _ in range(50):
        x = state(px=rng.uniform(-1, 1), py=rng.uniform(0.2, 0.6), zxl=rng.uniform(-1, 1),
                  zxr=rng.uniform(-1, 1))
        for side, foot in (("l", x[4]), ("r", x[5])):
            dx = x[0] - foot
            assert leg_angle(x, side) == pytest.approx(np.arctan2(dx, x[1]), abs=1e-12)
            assert leg_compression(x, side) == pytest.approx(0.55 - np.sqrt(dx * dx + x[1] ** 2),
                                                             abs=1e-12)


# ---------------------------------------------------------------------------
# dynamics


def test_rest_state_height_matches_oracle():
    assert rest_state(0.0)[1] == pytest.approx(REST_HEIGHT_015, abs=1e-12)


def test_rest_state_is_a_fixed_point():
    x = rest_state(0.3)
    u = np.array([equilibrium_delta(x), 0.0, 0.0, 0.0])
    assert abs(u[0]) < 1e-9
    nxt = slip_dynamics(x, u, CONTACTS[DS])
    np.testing.assert_allclose(nxt[2:4], x[2:4], atol=1e-12)
    np.testing.assert_allclose(nxt, x, atol=P.dt * 1e-12)


def test_swing_foot_follows_vz():
    x = state()
    nxt = slip_dynamics(x, np.array([0.0, 2.0, 0.0, 0.0]), (1, 0))
    assert nxt[5] == pytest.approx(x[5] + 0.02, abs=1e-15)
    assert nxt[4] == x[4]


def test_swing_foot_height_follows_vy():
    x = state(zyr=0.05)
    nxt = slip_dynamics(x, np.array([0.0, 0.0, 0.0, 1.0]), CONTACTS[LEFT])
    assert nxt[7] - x[7] == pytest.approx(0.01, abs=1e-15)


def test_zero_spring_force_leaves_gravity():
    # both legs at rest length and delta = -delta0
    x = state(px=0.0, py=np.sqrt(P.l0 ** 2 - 0.1 ** 2), zxl=-0.1, zxr=0.1)
    nxt = slip_dynamics(x, np.array([-P.delta0, 0.0, 0.0, 0.0]), (1, 1))
    assert nxt[3] - x[3] == pytest.approx(-P.g * P.dt, abs=1e-12)
    assert nxt[2] == pytest.approx(x[2], abs=1e-12)


def test_paper_literal_form_differs_only_in_horizontal_row():
    lit = SlipParams(dynamics=PAPER_LITERAL)
    x = state(px=0.05, py=0.45)
    u = np.array([1.0, 0.0, 0.0, 0.0])
    a = slip_dynamics(x, u, (1, 1))
    b = slip_dynamics(x, u, (1, 1), lit)
    assert a[2] != b[2]
    np.testing.assert_array_equal(np.delete(a, 2), np.delete(b, 2))


def _random_feasible(rng, stored):
    t = rng.integers(stored.T)
    x = stored.x[t] + 1e-3 * rng.standard_normal(8)
    x[6:] = np.abs(x[6:])
    u = stored.u[t] + 1e-2 * rng.standard_normal(4)
    return x, u


def test_dynamics_jacobians_match_finite_differences(slip_nominal):
    _, _, _, stored = slip_nominal
    rng = np.random.default_rng(3)
    for params in (P, SlipParams(dynamics=PAPER_LITERAL)):
        for _ in range(100):
            x, u = _random_feasible(rng, stored)
            for c in CONTACTS.values():
                A, B = slip_dynamics_jac(x, u, c, params)
                Ax = _fd_jacobian(lambda z: slip_dynamics(z, u, c, params), x)
                Bu = _fd_jacobian(lambda v: slip_dynamics(x, v, c, params), u)
                for got, ref in ((A, Ax), (B, Bu)):
                    err = np.abs(got - ref) / np.maximum(1.0, np.abs(ref))
                    assert err.max() <= 1e-5


def test_dynamics_hessian_matches_finite_differences(slip_nominal):
    _, _, _, stored = slip_nominal
    rng = np.random.default_rng(4)
    for _ in range(20):
        x, u = _random_feasible(rng, stored)
        w = rng.standard_normal(8)
        for c in CONTACTS.values():
            H = slip_dynamics_hess(x, u, c, w)

            def grad(z, c=c):
                A, B = slip_dynamics_jac(z[:8], z[8:], c)
                return w @ np.hstack([A, B])

            ref = _fd_jacobian(grad, np.concatenate([x, u]))
            assert np.max(np.abs(H - ref) / np.maximum(1.0, np.abs(ref))) <= 1e-5


def test_stance_feet_do_not_move_bitwise(slip_nominal):
    _, system, _, stored = slip_nominal
    for t in range(stored.T):
        i = stored.regions[t]
        nxt = system.step(stored.x[t], stored.u[t], i)
        gl, gr = CONTACTS[i]
        if gl:
            assert nxt[4] == stored.x[t][4]
        if gr:
            assert nxt[5] == stored.x[t][5]


def test_foot_height_update_ignores_com_state():
    rng = np.random.default_rng(5)
    u = np.array([0.5, 0.3, 0.2, -0.1])
    x = state(zyr=0.02)
    base = slip_dynamics(x, u, CONTACTS[LEFT])
    for _ in range(20):
        y = x.copy()
        y[:4] += rng.standard_normal(4) * [0.05, 0.05, 1.0, 1.0]
        assert slip_dynamics(y, u, CONTACTS[LEFT])[6:].tobytes() == base[6:].tobytes()


def test_region_dynamics_use_the_implied_contact_flags():
    goal = rest_state(0.2, 0.125)
    system = make_slip_system(goal)
    x, u = state(px=0.02, py=0.46, zyr=0.01), np.array([0.3, 0.4, 0.0, 0.1])
    for i in (DS, LEFT, RIGHT):
        np.testing.assert_array_equal(system.step(x, u, i), slip_dynamics(x, u, CONTACTS[i]))


# ---------------------------------------------------------------------------
# regions


def test_region_examples():
    system = make_slip_system(rest_state(0.0))
    x = rest_state(0.0)
    assert system.get_region(x) == DS
    x_l = x.copy()
    x_l[7] = 0.05
    assert system.get_region(x_l) == LEFT
    x_r = x.copy()
    x_r[6] = 0.05
    assert system.get_region(x_r) == RIGHT
    flight = x.copy()
    flight[6:] = 0.05
    with pytest.raises(NoRegion):
        system.get_region(flight)


def test_overcompressed_double_support_is_outside():
    system = make_slip_system(rest_state(0.0))
    x = state(py=0.3, zxl=0.0, zxr=0.0)  # both legs compressed by 0.25 > l_max
    with pytest.raises(NoRegion):
        system.get_region(x)


# ---------------------------------------------------------------------------
# stage cost


def test_stage_cost_examples():
    goal = rest_state(0.2, 0.125)
    assert slip_stage_cost(goal, np.zeros(4), goal) == 0.0
    x = goal.copy()
    x[1] += 0.1
    assert slip_stage_cost(x, np.zeros(4), goal) == pytest.approx(0.1, abs=1e-12)


def test_stage_cost_term_by_term():
    rng = np.random.default_rng(6)
    goal = rest_state(0.2, 0.125)
    cost = make_slip_cost(goal)
    for _ in range(50):
        x, u = rng.standard_normal(8), rng.standard_normal(4)
        ref = ((x[0] - goal[0]) ** 2 + 10 * (x[1] - goal[1]) ** 2 + x[2] ** 2 + x[3] ** 2
               + u[0] ** 2 + 0.1 * u[1] ** 2)
        assert slip_stage_cost(x, u, goal) == pytest.approx(ref, rel=1e-12, abs=1e-12)
        assert cost(x, u) == pytest.approx(ref, rel=1e-12, abs=1e-12)
        assert float(np.sum(cost.residual(x, u) ** 2)) == pytest.approx(ref, rel=1e-12)


# ---------------------------------------------------------------------------
# gait templates and trajectory generation


def test_gait_template_expansion():
    assert gait_sequence("ds:2, l:1,ds:1 , r:2") == [DS, DS, LEFT, DS, RIGHT, RIGHT]
    assert gait_sequence("") == []
    for bad in ("x:3", "ds:three", "ds:-1"):
        with pytest.raises(ValueError):
            gait_sequence(bad)


def test_generation_with_zero_length():
    goal = rest_state(0.0)
    system = make_slip_system(goal)
    traj = generate_feasible_trajectory(system, [], goal, goal, cost=make_slip_cost(goal))
    assert traj.T == 0
    assert check_feasible(system, traj).ok
    with pytest.raises(GenerationFailed) as err:
        generate_feasible_trajectory(system, [], rest_state(0.1), goal)
    assert err.value.kind == "precondition"


def test_generation_rejects_contradictory_gait():
    goal = rest_state(0.2, 0.125)
    system = make_slip_system(goal)
    with pytest.raises(GenerationFailed) as err:
        generate_feasible_trajectory(system, gait_sequence("ds:5,l:5,r:5,ds:5"), rest_state(0.0),
                                     goal)
    assert err.value.kind == "contradiction"
    assert "step 10" in str(err.value)


def test_nominal_generation_is_feasible(slip_nominal):
    cfg, system, cost, stored = slip_nominal
    assert stored.T == 100
    assert check_feasible(system, stored, cost).ok
    assert system.in_goal(stored.x[-1])
    np.testing.assert_allclose(stored.x[0], rest_state(0.0), atol=1e-12)


def test_params_validation():
    with pytest.raises(ValueError):
        SlipParams(l_max=0.6)
    with pytest.raises(ValueError):
        SlipParams(dt=0.0)
    with pytest.raises(ValueError):
        rest_state(0.0, half_stance=0.54)
