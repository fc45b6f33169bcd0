import sys
from pathlib import Path

import numpy as np
import pytest

sys.path.insert(0, str(Path(__file__).parent))

import criteria  # noqa: E402
from lpvmpc import lpv, plant  # noqa: E402
from lpvmpc.dataset import ModelScaling, split  # noqa: E402


@pytest.fixture(scope="session")
def engine_run():
    """2000 random-step cycles of the surrogate engine at 1500 rpm."""
    u = plant.random_step_inputs(2000, np.random.default_rng(0))
    return plant.simulate_plant(u, 1500.0)


@pytest.fixture(scope="session")
def engine_split(engine_run):
    train, val = split(engine_run, 0.8)
    return train, val, ModelScaling.fit(train)


@pytest.fixture(scope="session")
def engine_model(engine_split):
    train, _, scaling = engine_split
    return lpv.fit(train, lpv.KernelConfig.shared(1.0, 1e5), scaling)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


def pytest_terminal_summary(terminalreporter):
    if criteria.LINES:
        terminalreporter.section("acceptance criteria")
        for line in criteria.LINES:
            terminalreporter.write_line(line)
