import warnings

import numpy as np
import pytest

from _helpers import ACCEPTANCE_LINES
from scenemocap.bench.scenarios import default_template, make_scenario, shared_manifold
from scenemocap.kinematics import CameraIntrinsics


@pytest.fixture(scope="session")
def template():
    return default_template()


@pytest.fixture(scope="session")
def cam():
    return CameraIntrinsics.default()


@pytest.fixture(scope="session")
def manifold():
    return shared_manifold()


@pytest.fixture(scope="session")
def seat_scenario():
    return make_scenario("seat", seed=0)


@pytest.fixture(scope="session")
def wall_scenario():
    return make_scenario("wall", seed=1)


@pytest.fixture(scope="session")
def wall_seat_runs():
    """The full method on 20 seeded wall and seat scenarios (shared by several checks)."""
    from scenemocap.bench.ablation import run_ablation

    cases = [(("wall", "seat")[s % 2], s) for s in range(20)]
    return run_ablation("full", cases=cases, threads=4)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture(autouse=True)
def _quiet_runtime_warnings():
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", RuntimeWarning)
        yield


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for k in sorted(ACCEPTANCE_LINES):
            terminalreporter.write_line(ACCEPTANCE_LINES[k])
