import numpy as np
import pytest
import torch

from ecmnet.data import write_synthetic_dataset
from ecmnet.model import ModelConfig, make_variant
from ecmnet.utils.settings_manager import CONFIG_ENV_VAR, DATA_ROOT_ENV_VAR, settings


@pytest.fixture(autouse=True)
def clean_settings(monkeypatch):
    monkeypatch.delenv(CONFIG_ENV_VAR, raising=False)
    monkeypatch.delenv(DATA_ROOT_ENV_VAR, raising=False)
    settings.load()
    yield
    settings.load()


@pytest.fixture
def tiny_config():
    """Three-stage network small enough for CPU tests, all paths enabled"""
    return ModelConfig(
        num_classes=3,
        input_size=(64, 64),
        stem_channels=8,
        stage_channels=(8, 16, 32),
        blocks_per_stage=(1, 1, 2),
        dilation_schedule=((1,), (1,), (2, 4)),
        decoder_blocks=(1, 1, 1),
        decoder_dilations=((1,), (1,), (2,)),
        ffm_model_dim=8,
        ffm_state_dim=4,
    ).validate()


@pytest.fixture
def tiny_variant(tiny_config):
    def make(name):
        return make_variant(name, tiny_config)
    return make


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def seeded():
    torch.manual_seed(0)
    return 0


@pytest.fixture
def synthetic_root(tmp_path):
    root = tmp_path / "synthetic"
    write_synthetic_dataset(str(root), "train", 8, 32, 32, 3, seed=0)
    write_synthetic_dataset(str(root), "val", 4, 32, 32, 3, seed=1)
    return str(root)
