import sys, os
sys.path.append(os.path.dirname(os.path.dirname(__file__)))

import pytest

from firstlayer.engine.model import init_toy_weights, toy_config
from firstlayer.engine.precompute import transform_model


@pytest.fixture(scope="session")
def serial_config():
    return toy_config(layout="serial", name="toy-serial")


@pytest.fixture(scope="session")
def parallel_config():
    return toy_config(layout="parallel", name="toy-parallel")


@pytest.fixture(scope="session")
def moe_config():
    return toy_config(layout="parallel", n_experts=4, experts_top_k=2, name="toy-moe")


@pytest.fixture(scope="session")
def serial_weights(serial_config):
    return init_toy_weights(serial_config, seed=1)


@pytest.fixture(scope="session")
def parallel_weights(parallel_config):
    return init_toy_weights(parallel_config, seed=2)


@pytest.fixture(scope="session")
def moe_weights(moe_config):
    return init_toy_weights(moe_config, seed=3)


@pytest.fixture(scope="session")
def serial_transformed(serial_config, serial_weights):
    return transform_model(serial_config, serial_weights)


@pytest.fixture(scope="session")
def parallel_transformed(parallel_config, parallel_weights):
    return transform_model(parallel_config, parallel_weights)


@pytest.fixture(scope="session")
def moe_transformed(moe_config, moe_weights):
    return transform_model(moe_config, moe_weights)
