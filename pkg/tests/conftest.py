import sys
import time
from dataclasses import replace

import numpy as np
import pytest

from thrustwalk.cli import Scenario, cmd_run, default_config_text, default_spec
from thrustwalk.model import RobotParams


@pytest.fixture(scope="session")
def params():
    return RobotParams()


@pytest.fixture(scope="session")
def spec():
    return default_spec()


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


@pytest.fixture(scope="session")
def default_scenario():
    return Scenario.from_ini(default_config_text())


@pytest.fixture(scope="session")
def walk_runs(default_scenario, tmp_path_factory):
    """Default scenario with and without thrust, run once per session.

    Each outcome carries its wall-clock time in ``elapsed``.
    """
    out = tmp_path_factory.mktemp("walk")
    runs = {}
    for tag, scenario in (
        ("thrust", default_scenario),
        ("no_thrust", default_scenario.with_(nmpc=replace(default_scenario.nmpc, use_thrust=False))),
    ):
        t0 = time.perf_counter()
        runs[tag] = cmd_run(scenario, out, tag=tag)
        runs[tag].elapsed = time.perf_counter() - t0
    return runs


def pytest_terminal_summary(terminalreporter):
    mod = sys.modules.get("test_acceptance")
    lines = getattr(mod, "RESULTS", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
