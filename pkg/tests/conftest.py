# tests/conftest.py
import numpy as np
import pytest

from jointdiff.data.synthdata import GeneratorConfig
from jointdiff.diffusion.schedule import Schedules, cosine_discrete_schedule, linear_beta_schedule
from jointdiff.model.joint import JointModel
from jointdiff.nn.denoiser import DenoiserConfig, init_params


def pytest_addoption(parser):
    parser.addoption("--runslow", action="store_true", default=False, help="run long acceptance tests")


def pytest_configure(config):
    config.addinivalue_line("markers", "slow: long-running acceptance test (needs --runslow)")


def pytest_collection_modifyitems(config, items):
    if config.getoption("--runslow"):
        return
    skip_slow = pytest.mark.skip(reason="needs --runslow")
    for item in items:
        if "slow" in item.keywords:
            item.add_marker(skip_slow)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return DenoiserConfig(side=8, base_channels=4, depth=1, temb_dim=8, norm_groups=2, precision="float64")


@pytest.fixture
def small_schedules():
    return Schedules(linear_beta_schedule(20), cosine_discrete_schedule(20, 2))


@pytest.fixture
def tiny_generator():
    return GeneratorConfig(side=8, r_min=1.0, r_max=3.0)


@pytest.fixture
def tiny_model(tiny_config, small_schedules):
    params = init_params(tiny_config, np.random.default_rng(7), zero_init_heads=False)
    return JointModel(params, tiny_config, small_schedules)
