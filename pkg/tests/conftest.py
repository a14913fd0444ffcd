import numpy as np
import pytest

from motionlift.network import Model, NetworkConfig
from motionlift.skeleton import JointTopology, generate_synthetic_dataset


def path_topology(n):
    return JointTopology(n, tuple((i, i + 1) for i in range(n - 1)))


@pytest.fixture
def micro_config():
    return NetworkConfig(layers=2, dim=8, heads=2, mlp_ratio=2, frames=4, joints=3, action_classes=4)


@pytest.fixture
def micro_model(micro_config):
    return Model(micro_config, path_topology(3), seed=0)


@pytest.fixture
def tiny_config():
    return NetworkConfig(layers=2, dim=16, heads=4, mlp_ratio=2, frames=8, joints=17)


@pytest.fixture(scope="session")
def small_dataset():
    return generate_synthetic_dataset(6, 8, noise_std=0.01, seed=11)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


# filled by test_acceptance.record(); echoed after the run so the lines show without -s
ACCEPTANCE_LINES = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
