# ecmnet/model.py
"""ECMNet assembly: CNN encoder/decoder, three long skip connections with MSAUs and the FFM capsule."""
import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field, replace

import torch
import torch.nn as nn
import torch.nn.functional as F
import toml

from ecmnet.blocks import EDAB, ConvNormAct, DownsamplingBlock, EDABConfig, NORM_KINDS
from ecmnet.errors import ConfigError, InputSizeError
from ecmnet.ffm import FFM, FFMConfig
from ecmnet.msau import MSAU, MSAUConfig

logger = logging.getLogger(__name__)

CONFIG_SCHEMA_VERSION = 1
INPUT_MULTIPLE = 8
NETWORK_STRIDE = 16
NUM_STAGES = 3


@dataclass(frozen=True)
class AblationSwitches:
    connections: tuple = (True, True, True)
    msaus: tuple = (True, True, True)
    ffm: bool = True

    def validate(self):
        if len(self.connections) != NUM_STAGES or len(self.msaus) != NUM_STAGES:
            raise ConfigError(f"Ablation switches need {NUM_STAGES} connection and MSAU flags")
        for i, (conn, msau) in enumerate(zip(self.connections, self.msaus), start=1):
            if msau and not conn:
                raise ConfigError(f"MSAU {i} is enabled without long connection {i}")
        return self

    def covers(self, other):
        """True when every path enabled in other is also enabled here"""
        return (all(a or not b for a, b in zip(self.connections, other.connections))
                and all(a or not b for a, b in zip(self.msaus, other.msaus))
                and (self.ffm or not other.ffm))


def _switches(k_connections=0, k_msaus=0, ffm=False):
    return AblationSwitches(
        connections=tuple(i < k_connections for i in range(NUM_STAGES)),
        msaus=tuple(i < k_msaus for i in range(NUM_STAGES)),
        ffm=ffm,
    )


# Ablation lattice, ordered as reported
VARIANTS = {
    "Baseline": _switches(),
    "A1": _switches(1),
    "A2": _switches(2),
    "A3": _switches(3),
    "B1": _switches(1, 1),
    "B2": _switches(2, 2),
    "B3": _switches(3, 3),
    "C1": _switches(ffm=True),
    "C2": _switches(3, 0, ffm=True),
    "C3": _switches(3, 3, ffm=True),
}


def _as_tuple(value):
    if isinstance(value, (list, tuple)):
        return tuple(_as_tuple(v) for v in value)
    return value


@dataclass(frozen=True)
class ModelConfig:
    num_classes: int = 19
    input_size: tuple = (1024, 1024)
    stem_channels: int = 16
    stage_channels: tuple = (16, 48, 144)
    blocks_per_stage: tuple = (3, 3, 8)
    dilation_schedule: tuple = ((1, 1, 2), (1, 1, 2), (2, 2, 4, 4, 8, 8, 16, 16))
    decoder_blocks: tuple = (1, 1, 2)
    decoder_dilations: tuple = ((1,), (1,), (2, 4))
    shuffle_groups: int = 2
    norm_kind: str = "batch"
    msau_kernels: tuple = (3, 5, 7)
    msau_reduction: int = 4
    ffm_model_dim: int = 80
    ffm_state_dim: int = 8
    ffm_ssm_ratio: int = 2
    ffm_expansion: int = 2
    ffm_depth: int = 1
    variant: str = "C3"
    switches: AblationSwitches = field(default_factory=AblationSwitches)

    def validate(self):
        if self.num_classes < 1:
            raise ConfigError(f"num_classes must be positive, got {self.num_classes}")
        for name in ("stage_channels", "blocks_per_stage", "dilation_schedule",
                     "decoder_blocks", "decoder_dilations"):
            if len(getattr(self, name)) != NUM_STAGES:
                raise ConfigError(f"{name} must have {NUM_STAGES} entries, got {getattr(self, name)}")
        for i in range(NUM_STAGES):
            if len(self.dilation_schedule[i]) != self.blocks_per_stage[i]:
                raise ConfigError(
                    f"Stage {i + 1} has {self.blocks_per_stage[i]} blocks but "
                    f"{len(self.dilation_schedule[i])} dilation rates"
                )
            if len(self.decoder_dilations[i]) != self.decoder_blocks[i]:
                raise ConfigError(
                    f"Decoder stage {i + 1} has {self.decoder_blocks[i]} blocks but "
                    f"{len(self.decoder_dilations[i])} dilation rates"
                )
        if self.stem_channels < 1:
            raise ConfigError(f"stem_channels must be positive, got {self.stem_channels}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"Unknown norm_kind '{self.norm_kind}'")
        height, width = self.input_size
        if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
            raise InputSizeError(height, width, INPUT_MULTIPLE)
        self.switches.validate()
        for cfg in self.edab_configs():
            cfg.validate()
        if self.switches.ffm:
            self.ffm_config().validate()
        for i in range(NUM_STAGES):
            if self.switches.msaus[i]:
                self.msau_config(i).validate()
        return self

    # sub-block configs
    def edab_config(self, channels, dilation):
        return EDABConfig(channels=channels, dilation_rate=dilation, norm_kind=self.norm_kind,
                          shuffle_groups=self.shuffle_groups)

    def edab_configs(self):
        configs = []
        for i in range(NUM_STAGES):
            width = self.stage_channels[i]
            configs += [self.edab_config(width, r) for r in self.dilation_schedule[i]]
            configs += [self.edab_config(width, r) for r in self.decoder_dilations[i]]
        return configs

    def msau_config(self, stage):
        return MSAUConfig(channels=self.stage_channels[stage], kernel_set=tuple(self.msau_kernels),
                          channel_reduction=self.msau_reduction, norm_kind=self.norm_kind)

    def ffm_config(self):
        return FFMConfig(
            fused_channels=sum(self.stage_channels),
            out_channels=self.stage_channels[-1],
            model_dim=self.ffm_model_dim,
            state_dim=self.ffm_state_dim,
            expansion=self.ffm_expansion,
            ssm_ratio=self.ffm_ssm_ratio,
            depth=self.ffm_depth,
            norm_kind=self.norm_kind,
        )

    def param_count(self):
        """Trainable scalars of the network this config builds, without allocating weights"""
        norm = 2 if self.norm_kind == "batch" else 0
        widths = self.stage_channels
        total = 27 * self.stem_channels + norm * self.stem_channels

        previous = self.stem_channels
        for width in widths:
            conv_out = width - previous if width > previous else width
            total += 9 * previous * conv_out + norm * width
            previous = width
        total += sum(cfg.param_count() for cfg in self.edab_configs())
        for i in (2, 1):
            total += widths[i] * widths[i - 1] + norm * widths[i - 1]
        total += widths[0] * self.num_classes + self.num_classes

        for i in range(NUM_STAGES):
            if self.switches.connections[i]:
                total += widths[i] * widths[i] + norm * widths[i]
            if self.switches.msaus[i]:
                total += self.msau_config(i).param_count()
        if self.switches.ffm:
            total += self.ffm_config().param_count()
        return total

    # serialisation
    def to_dict(self):
        data = asdict(self)
        data["switches"] = asdict(self.switches)
        return data

    @classmethod
    def from_dict(cls, data):
        data = dict(data)
        known = {f for f in cls.__dataclass_fields__}
        unknown = set(data) - known
        if unknown:
            raise ConfigError(f"Unknown model config keys: {sorted(unknown)}")
        switches = data.pop("switches", None)
        kwargs = {k: _as_tuple(v) for k, v in data.items()}
        if switches is not None:
            if isinstance(switches, dict):
                switches = AblationSwitches(**{k: _as_tuple(v) for k, v in switches.items()})
            kwargs["switches"] = switches
        elif "variant" in kwargs:
            kwargs["switches"] = variant_switches(kwargs["variant"])
        return cls(**kwargs).validate()

    @classmethod
    def from_settings(cls, section):
        """Build from the [model] section of a settings document"""
        return cls.from_dict(section)

    def to_toml(self):
        return toml.dumps({"schema_version": CONFIG_SCHEMA_VERSION, "model": self.to_dict()})

    @classmethod
    def from_toml(cls, text):
        document = toml.loads(text)
        version = document.get("schema_version")
        if version != CONFIG_SCHEMA_VERSION:
            raise ConfigError(f"Model config schema_version {version!r}, expected {CONFIG_SCHEMA_VERSION}")
        return cls.from_dict(document.get("model", {}))


def config_hash(config):
    """SHA-256 of the canonical JSON form of a config dict or dataclass"""
    if hasattr(config, "to_dict"):
        config = config.to_dict()
    canonical = json.dumps(config, sort_keys=True, separators=(",", ":"), default=list)
    return hashlib.sha256(canonical.encode("utf-8")).hexdigest()


def variant_switches(name):
    if name not in VARIANTS:
        raise ConfigError(f"Unknown ablation variant '{name}', expected one of {list(VARIANTS)}")
    return VARIANTS[name]


def make_variant(name, base=None):
    """ModelConfig for an ablation variant, other fields taken from base"""
    base = base or ModelConfig()
    return replace(base, variant=name, switches=variant_switches(name)).validate()


class ECMNet(nn.Module):
    """
    Encoder: stem (1/2) and three EDAB stages at 1/4, 1/8, 1/16.
    Decoder: mirrored EDAB stages (deep to shallow) joined by 1x1 conv + bilinear x2.
    Long connection i adds the (MSAU-refined) stage-i feature into the decoder stage
    at the same resolution; the FFM fuses the bottleneck with the two shallower
    refined features before the decoder.
    """

    def __init__(self, cfg: ModelConfig):
        super().__init__()
        self.cfg = cfg.validate()
        nk = cfg.norm_kind
        widths = cfg.stage_channels

        self.stem = ConvNormAct(3, cfg.stem_channels, 3, stride=2, padding=1, norm_kind=nk)
        self.downsamplers = nn.ModuleList()
        self.encoder = nn.ModuleList()
        previous = cfg.stem_channels
        for i, width in enumerate(widths):
            self.downsamplers.append(DownsamplingBlock(previous, width, nk))
            self.encoder.append(nn.Sequential(
                *[EDAB(cfg.edab_config(width, r)) for r in cfg.dilation_schedule[i]]
            ))
            previous = width

        self.decoder = nn.ModuleList([
            nn.Sequential(*[EDAB(cfg.edab_config(widths[i], r)) for r in cfg.decoder_dilations[i]])
            for i in range(NUM_STAGES)
        ])
        # upsamplers["2"] lifts decoder stage 3 to stage 2 resolution, and so on
        self.upsamplers = nn.ModuleDict({
            str(i): nn.Sequential(
                ConvNormAct(widths[i], widths[i - 1], 1, norm_kind=nk),
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
            )
            for i in (2, 1)
        })

        self.skips = nn.ModuleDict({
            str(i): ConvNormAct(widths[i], widths[i], 1, norm_kind=nk, act=False)
            for i in range(NUM_STAGES) if cfg.switches.connections[i]
        })
        self.msaus = nn.ModuleDict({
            str(i): MSAU(cfg.msau_config(i))
            for i in range(NUM_STAGES) if cfg.switches.msaus[i]
        })
        self.ffm = FFM(cfg.ffm_config()) if cfg.switches.ffm else None
        self.ffm_pools = nn.ModuleList([
            nn.AvgPool2d(2 ** (NUM_STAGES - 1 - i)) for i in range(NUM_STAGES - 1)
        ])

        self.classifier = nn.Conv2d(widths[0], cfg.num_classes, 1, bias=True)
        self.active = cfg.switches

    def set_active(self, switches):
        """Mask constructed paths at runtime; switches must be a subset of the built ones"""
        switches = switches.validate()
        if not self.cfg.switches.covers(switches):
            raise ConfigError(f"Cannot activate {switches}: model was built with {self.cfg.switches}")
        self.active = switches
        return self

    def _pad_input(self, x):
        height, width = x.shape[-2:]
        if height % INPUT_MULTIPLE or width % INPUT_MULTIPLE:
            raise InputSizeError(height, width, INPUT_MULTIPLE)
        pad_h = (-height) % NETWORK_STRIDE
        pad_w = (-width) % NETWORK_STRIDE
        if pad_h or pad_w:
            logger.warning(
                f"Input {height}x{width} is not a multiple of {NETWORK_STRIDE}; "
                f"reflect-padding by ({pad_h}, {pad_w}) and cropping the logits"
            )
            mode = "reflect" if pad_h < height and pad_w < width else "replicate"
            x = F.pad(x, (0, pad_w, 0, pad_h), mode=mode)
        return x, (height, width)

    def encode(self, x):
        features = []
        out = self.stem(x)
        for down, stage in zip(self.downsamplers, self.encoder):
            out = stage(down(out))
            features.append(out)
        return features

    def refine(self, features):
        """MSAU outputs where active, raw encoder features elsewhere"""
        refined = []
        for i, feature in enumerate(features):
            if self.active.msaus[i]:
                feature = self.msaus[str(i)](feature)
            refined.append(feature)
        return refined

    def forward(self, x):
        x, (height, width) = self._pad_input(x)
        features = self.encode(x)
        refined = self.refine(features)

        out = features[-1]
        if self.active.ffm:
            pooled = [pool(refined[i]) for i, pool in enumerate(self.ffm_pools)]
            out = self.ffm(out, *pooled)

        for i in reversed(range(NUM_STAGES)):
            if self.active.connections[i]:
                out = out + self.skips[str(i)](refined[i])
            out = self.decoder[i](out)
            if i > 0:
                out = self.upsamplers[str(i)](out)

        logits = self.classifier(out)
        logits = F.interpolate(logits, size=x.shape[-2:], mode="bilinear", align_corners=False)
        return logits[..., :height, :width]


def build_model(cfg: ModelConfig):
    """Instantiate ECMNet for a validated config"""
    model = ECMNet(cfg)
    total = sum(p.numel() for p in model.parameters() if p.requires_grad)
    logger.info(f"Built ECMNet variant={cfg.variant} classes={cfg.num_classes} params={total:,}")
    return model


def shape_manifest(model):
    """Name -> shape of every tensor in the state dict"""
    return {name: list(t.shape) for name, t in model.state_dict().items()}
