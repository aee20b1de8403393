import os

import numpy as np
import pytest

from gdmnowcast.data import CensoredTriangle
from gdmnowcast.experiment import SimulationScenario, simulate_dataset


def pytest_collection_modifyitems(config, items):
    if os.environ.get("GDMNOWCAST_FULL") == "1":
        return
    skip = pytest.mark.skip(reason="multi-hour run; set GDMNOWCAST_FULL=1")
    for item in items:
        if "full" in item.keywords:
            item.add_marker(skip)


@pytest.fixture(scope="session")
def small_sim():
    return simulate_dataset(SimulationScenario(T=40, S=2, d_max=5, seed=11))


@pytest.fixture(scope="session")
def small_ct(small_sim):
    return CensoredTriangle(small_sim.triangle, small_sim.triangle.n_times - 1)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys

    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
