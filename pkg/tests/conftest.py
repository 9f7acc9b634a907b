from pathlib import Path

import numpy as np
import pytest

from piecewise_mpc import config as C
from piecewise_mpc.pwa import PwaParams, generate_pwa_trajectory, make_pwa_system, pwa_cost

CONFIGS = Path(__file__).resolve().parents[1] / "configs"

PWA_START = np.array([-1.5, 0.0])
PWA_T = 40


@pytest.fixture(scope="session")
def pwa():
    """Two-region PWA system and its quadratic stage cost."""
    params = PwaParams()
    return make_pwa_system(params), pwa_cost(params)


@pytest.fixture(scope="session")
def pwa_stored(pwa):
    system, cost = pwa
    return generate_pwa_trajectory(system, PWA_START, PWA_T, cost)


@pytest.fixture(scope="session")
def slip_nominal():
    """Nominal SLIP task built from the shipped config: ``(cfg, system, cost, stored)``."""
    cfg = C.load_config(CONFIGS / "slip_nominal.ini")
    system, cost, x_S, x_goal = C.build_system(cfg)
    stored = C.generate_trajectory(cfg, system, cost, x_S, x_goal)
    return cfg, system, cost, stored
