# ecmnet/utils/settings_manager.py
import copy
import logging
import os

import toml

from ecmnet.errors import ConfigError

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1
CONFIG_ENV_VAR = "ECMNET_CONFIG"
DATA_ROOT_ENV_VAR = "ECMNET_DATA_ROOT"

# Every key a config document may carry, with its default value
DEFAULT_SETTINGS = {
    "schema_version": SCHEMA_VERSION,
    "model": {
        "variant": "C3",
        "num_classes": 19,
        "input_size": [1024, 1024],
        "stem_channels": 16,
        "stage_channels": [16, 48, 144],
        "blocks_per_stage": [3, 3, 8],
        "dilation_schedule": [[1, 1, 2], [1, 1, 2], [2, 2, 4, 4, 8, 8, 16, 16]],
        "decoder_blocks": [1, 1, 2],
        "decoder_dilations": [[1], [1], [2, 4]],
        "shuffle_groups": 2,
        "norm_kind": "batch",
        "msau_kernels": [3, 5, 7],
        "msau_reduction": 4,
        "ffm_model_dim": 80,
        "ffm_state_dim": 8,
        "ffm_ssm_ratio": 2,
        "ffm_expansion": 2,
        "ffm_depth": 1,
    },
    "train": {
        "optimizer": "adamw",
        "lr": 1e-3,
        "weight_decay": 1e-4,
        "poly_power": 0.9,
        "max_iterations": 2000,
        "batch_size": 8,
        "seed": 0,
        "class_weighting": False,
        "checkpoint_every": 100,
        "eval_every": 200,
        "device": "cpu",
        "ablation_seeds": [0, 1, 2],
    },
    "data": {
        "dataset": "synthetic",
        "root": "",
        "train_split": "train",
        "val_split": "val",
        "crop_size": [512, 512],
        "flip_prob": 0.5,
        "scale_range": [0.75, 1.5],
        "synth_size": [64, 64],
        "synth_classes": 3,
        "synth_priors": [],
        "synth_shapes": 3,
        "synth_train_samples": 512,
        "synth_val_samples": 64,
    },
    "analysis": {
        "flops_per_mac": 2,
        "itemize_depth": 2,
        "latency_trials": 5,
        "latency_warmup": 2,
    },
}


def _merge_section(section_name, base, incoming, source):
    """Overlay incoming keys on a default section, rejecting keys it does not know"""
    if not isinstance(incoming, dict):
        raise ConfigError(f"Section [{section_name}] in {source} must be a table")
    for key, value in incoming.items():
        if key not in base:
            raise ConfigError(f"Unknown key '{section_name}.{key}' in {source}")
        base[key] = _coerce(section_name, key, base[key], value)


def _coerce(section_name, key, default, value):
    """Check a value against the type of its default"""
    name = f"{section_name}.{key}"
    if isinstance(default, bool):
        if not isinstance(value, bool):
            raise ConfigError(f"'{name}' expects true/false, got {value!r}")
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            raise ConfigError(f"'{name}' expects a number, got {value!r}")
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            raise ConfigError(f"'{name}' expects an integer, got {value!r}")
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            raise ConfigError(f"'{name}' expects a list, got {value!r}")
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            raise ConfigError(f"'{name}' expects a string, got {value!r}")
        return value
    return value


def _parse_value(raw):
    """Parse an override value as a TOML scalar or array, falling back to a bare string"""
    try:
        return toml.loads(f"value = {raw}")["value"]
    except toml.TomlDecodeError:
        return raw


class SettingsManager:
    _instance = None

    def __new__(cls):
        if cls._instance is None:
            cls._instance = super(SettingsManager, cls).__new__(cls)
            cls._instance._settings = None
            cls._instance._source = None
            cls._instance.load()
        return cls._instance

    def load(self, path=None):
        """Load settings from a path, the ECMNET_CONFIG file, or the built-in defaults"""
        settings = copy.deepcopy(DEFAULT_SETTINGS)
        path = path or os.getenv(CONFIG_ENV_VAR)
        if path:
            if not os.path.exists(path):
                raise ConfigError(f"Config file not found at {path}")
            try:
                with open(path, "r") as f:
                    document = toml.load(f)
            except toml.TomlDecodeError as e:
                raise ConfigError(f"Config file {path} is not valid TOML: {e}") from e

            version = document.pop("schema_version", None)
            if version != SCHEMA_VERSION:
                raise ConfigError(
                    f"Config file {path} has schema_version {version!r}, expected {SCHEMA_VERSION}"
                )
            for section, values in document.items():
                if section not in settings or section == "schema_version":
                    raise ConfigError(f"Unknown section [{section}] in {path}")
                _merge_section(section, settings[section], values, path)
            logger.info(f"Loaded settings from {path}")

        self._settings = settings
        self._source = path
        return self

    def apply_overrides(self, overrides):
        """Apply dotted key=value overrides, e.g. ["train.lr=0.01"]"""
        for item in overrides or []:
            if "=" not in item:
                raise ConfigError(f"Override '{item}' must look like section.key=value")
            dotted, raw = item.split("=", 1)
            parts = dotted.strip().split(".")
            if len(parts) != 2:
                raise ConfigError(f"Override key '{dotted}' must be section.key")
            section, key = parts
            if section not in self._settings or section == "schema_version":
                raise ConfigError(f"Unknown section '{section}' in override '{item}'")
            _merge_section(section, self._settings[section], {key: _parse_value(raw.strip())}, "overrides")
            logger.debug(f"Override {section}.{key} = {self._settings[section][key]!r}")
        return self

    def reset(self):
        """Drop any loaded file and overrides"""
        return self.load()

    def __getitem__(self, key):
        """Allow dict-like access: settings["train"]"""
        return self._settings[key]

    def __contains__(self, key):
        """Allow 'in' operator: "model" in settings"""
        return key in self._settings

    def get(self, key, default=None):
        """Get a top-level value with optional default"""
        return self._settings.get(key, default)

    def get_nested(self, *keys):
        """Get nested value like settings.get_nested("train", "lr")"""
        value = self._settings
        for key in keys:
            if isinstance(value, dict) and key in value:
                value = value[key]
            else:
                return None
        return value

    def get_section(self, section):
        """Get an entire section as a dictionary"""
        section_data = self._settings.get(section, {})
        return copy.deepcopy(dict(section_data)) if section_data else {}

    def to_dict(self):
        return copy.deepcopy(self._settings)

    def snapshot(self, path):
        """Write the resolved settings so a run can be replayed from this file alone"""
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        with open(path, "w") as f:
            toml.dump(self._settings, f)
        logger.info(f"Resolved config written to {path}")
        return path

    @property
    def source(self):
        return self._source

    # Convenience properties for the sections
    @property
    def model(self):
        return self.get_section("model")

    @property
    def train(self):
        return self.get_section("train")

    @property
    def data(self):
        return self.get_section("data")

    @property
    def analysis(self):
        return self.get_section("analysis")

    @property
    def data_root(self):
        """Dataset root from the config, else from ECMNET_DATA_ROOT"""
        return self._settings["data"]["root"] or os.getenv(DATA_ROOT_ENV_VAR, "")


# Global instance
settings = SettingsManager()
