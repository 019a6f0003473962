import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

from adload.simulator import EnvironmentConfig, enumerate_states, reward_table  # noqa: E402


@pytest.fixture(scope="session")
def env():
    return EnvironmentConfig()


@pytest.fixture(scope="session")
def states(env):
    return enumerate_states(env)


@pytest.fixture(scope="session")
def table(env, states):
    return reward_table(env, states=states)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    module = sys.modules.get("test_acceptance")
    lines = getattr(module, "RESULTS", [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in sorted(lines):
            terminalreporter.write_line(line)
