import numpy as np
import pytest

from promptst.autodiff import reset_tape
from promptst.config import ModelConfig
from promptst.dataio import synthesize
from promptst.experiments import prepare

# Default-size config used by the parameter-count checks
FULL_CONFIG = ModelConfig(num_regions=64, d_model=32, horizon=12, temporal_layers=2, spatial_layers=2)


@pytest.fixture(autouse=True)
def _clean_tape():
    reset_tape()
    yield
    reset_tape()


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    """T=4, H=3, N=6 (2x3 grid), C=2, D=8, one layer per encoder, two heads"""
    return ModelConfig(input_len=4, horizon=3, num_regions=6, num_attributes=2, d_model=8,
                       temporal_layers=1, spatial_layers=1, num_heads=2)


@pytest.fixture
def tiny_series():
    # 100 steps split 70/10/20
    return synthesize(2, 3, 2, 100, seed=7)


@pytest.fixture
def tiny_prepared(tiny_series, tiny_config):
    return prepare(tiny_series, tiny_config.input_len, tiny_config.horizon)


@pytest.fixture
def tiny_dataset(tiny_prepared):
    return tiny_prepared.dataset


@pytest.fixture
def full_config():
    return FULL_CONFIG
