import os
import sys

import numpy as np
import pytest

sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from v2gsim.env import synthetic_profiles
from v2gsim.fleet import EvSpec, Horizon, sample_fleet

ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.write_sep("=", "acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def profiles():
    return synthetic_profiles(seed=0)


@pytest.fixture(scope="session")
def small_fleet():
    return sample_fleet(20, seed=11)


@pytest.fixture()
def rng():
    return np.random.default_rng(2024)


def tiny_horizon():
    """4-slot horizon used by the small-instance oracles."""
    return Horizon(start_hour=0, n_slots=4, dt_h=1.0)


def tiny_spec(rng=None):
    """Small-capacity spec whose departure band is reachable in 4 slots."""
    if rng is None:
        return EvSpec(capacity_kwh=8.0, p_charge_max_kw=4.0,
                      p_discharge_max_kw=-4.0, efficiency=0.95)
    return EvSpec(capacity_kwh=float(rng.uniform(6.0, 10.0)),
                  p_charge_max_kw=float(rng.uniform(3.0, 5.0)),
                  p_discharge_max_kw=float(-rng.uniform(3.0, 5.0)),
                  efficiency=float(rng.uniform(0.9, 1.0)))
