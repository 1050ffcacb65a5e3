import os

import pytest
import toml

from ecmnet.errors import ConfigError
from ecmnet.model import ModelConfig
from ecmnet.utils.settings_manager import (CONFIG_ENV_VAR, DATA_ROOT_ENV_VAR, DEFAULT_SETTINGS,
                                           SettingsManager, settings)

CONFIG_DIR = os.path.join(os.path.dirname(__file__), os.pardir, "configs")


def _write(tmp_path, text, name="run.toml"):
    path = tmp_path / name
    path.write_text(text)
    return str(path)


def test_singleton():
    assert SettingsManager() is settings


def test_defaults_build_the_calibrated_model():
    assert settings.source is None
    cfg = ModelConfig.from_settings(settings.model)
    assert cfg.variant == "C3"
    assert cfg.stage_channels == (16, 48, 144)
    assert settings["train"]["lr"] == DEFAULT_SETTINGS["train"]["lr"]


def test_load_overlays_file(tmp_path):
    path = _write(tmp_path, 'schema_version = 1\n[train]\nlr = 0.005\n[data]\ndataset = "camvid"\n')
    settings.load(path)
    assert settings.source == path
    assert settings.train["lr"] == 0.005
    assert settings.data["dataset"] == "camvid"
    assert settings.train["batch_size"] == DEFAULT_SETTINGS["train"]["batch_size"]


def test_environment_variable(tmp_path, monkeypatch):
    path = _write(tmp_path, "schema_version = 1\n[train]\nseed = 7\n")
    monkeypatch.setenv(CONFIG_ENV_VAR, path)
    settings.load()
    assert settings.get_nested("train", "seed") == 7


def test_shipped_configs_load():
    for name in ("c3", "baseline", "synthetic", "camvid", "cityscapes"):
        settings.load(os.path.join(CONFIG_DIR, f"{name}.toml"))
        ModelConfig.from_settings(settings.model)


@pytest.mark.parametrize("text,match", [
    ("[train]\nlr = 0.1\n", "schema_version"),
    ("schema_version = 2\n", "schema_version"),
    ("schema_version = 1\n[optim]\nlr = 0.1\n", "Unknown section"),
    ("schema_version = 1\n[train]\nepochs = 3\n", "train.epochs"),
    ("schema_version = 1\n[train]\nlr = \"fast\"\n", "expects a number"),
    ("schema_version = 1\n[train]\nclass_weighting = 1\n", "true/false"),
    ("schema_version = 1\n[model]\nnum_classes = 2.5\n", "integer"),
    ("schema_version = 1\ntrain = 3\n", "must be a table"),
    ("schema_version = 1\n[train\n", "not valid TOML"),
])
def test_invalid_documents(tmp_path, text, match):
    with pytest.raises(ConfigError, match=match):
        settings.load(_write(tmp_path, text))


def test_missing_file(tmp_path):
    with pytest.raises(ConfigError, match="not found"):
        settings.load(str(tmp_path / "absent.toml"))


class TestOverrides:
    def test_scalars_and_arrays(self):
        settings.apply_overrides(["train.lr=0.01", "model.input_size=[512, 1024]", 'model.variant="B1"',
                                  "train.class_weighting=true", "data.dataset=camvid"])
        assert settings.train["lr"] == 0.01
        assert settings.model["input_size"] == [512, 1024]
        assert settings.model["variant"] == "B1"
        assert settings.train["class_weighting"] is True
        assert settings.data["dataset"] == "camvid"

    def test_integer_promoted_for_float_keys(self):
        settings.apply_overrides(["train.lr=1"])
        assert isinstance(settings.train["lr"], float)

    @pytest.mark.parametrize("item", ["train.lr", "lr=0.1", "train.optim.lr=0.1", "optim.lr=0.1",
                                      "train.epochs=3"])
    def test_rejected(self, item):
        with pytest.raises(ConfigError):
            settings.apply_overrides([item])

    def test_reset_discards_overrides(self):
        settings.apply_overrides(["train.seed=5"])
        settings.reset()
        assert settings.train["seed"] == 0


def test_sections_are_copies():
    section = settings.train
    section["lr"] = 99.0
    assert settings.train["lr"] != 99.0


def test_data_root_falls_back_to_environment(monkeypatch, tmp_path):
    assert settings.data_root == ""
    monkeypatch.setenv(DATA_ROOT_ENV_VAR, str(tmp_path))
    assert settings.data_root == str(tmp_path)
    settings.apply_overrides([f'data.root="{tmp_path / "explicit"}"'])
    assert settings.data_root == str(tmp_path / "explicit")


def test_snapshot_round_trip(tmp_path):
    settings.apply_overrides(["train.max_iterations=10", "model.num_classes=11"])
    path = settings.snapshot(str(tmp_path / "out" / "resolved_config.toml"))
    expected = settings.to_dict()
    assert toml.load(path) == expected
    settings.load(path)
    assert settings.to_dict() == expected


def test_dict_style_access():
    assert "model" in settings
    assert "optim" not in settings
    assert settings.get("schema_version") == 1
    assert settings.get("optim", {}) == {}
    assert settings.get_nested("train", "missing") is None
