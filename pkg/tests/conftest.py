"""Shared fixtures for the PBE-UNet test suite."""
import sys
from pathlib import Path

import pytest

# Add parent directory to path
sys.path.insert(0, str(Path(__file__).parent.parent))

from pbeunet.models import PbeConfig, RunConfig  # noqa: E402
from pbeunet.tensor import precision  # noqa: E402


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run desk-scale training experiments")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: desk-scale training experiment, needs --runslow")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def f64():
    """Run the test body with float64 tensors."""
    with precision("f64-check") as mode:
        yield mode


@pytest.fixture
def small_config() -> PbeConfig:
    return PbeConfig(base_channels=8)


@pytest.fixture
def tiny_run() -> RunConfig:
    """A run small enough for a few real optimizer steps in a unit test."""
    return RunConfig(
        model={"base_channels": 8},
        train={"batch_size": 2, "max_iters": 3, "seed": 0},
        synth={"count": 6, "size": 32, "seed": 3},
    )
