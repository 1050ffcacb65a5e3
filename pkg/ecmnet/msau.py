# ecmnet/msau.py
"""Multi-scale attention unit refining each long skip connection."""
import logging
from dataclasses import asdict, dataclass, field

import torch.nn as nn

from ecmnet.blocks import NORM_KINDS, make_norm
from ecmnet.errors import ConfigError

logger = logging.getLogger(__name__)


@dataclass(frozen=True)
class MSAUConfig:
    channels: int
    kernel_set: tuple = field(default=(3, 5, 7))
    channel_reduction: int = 4
    gate_kernel: int = 7
    norm_kind: str = "batch"

    def validate(self):
        if self.channels < 2 or self.channels % 2 != 0:
            raise ConfigError(f"MSAU channels must be even and positive, got {self.channels}")
        if not self.kernel_set:
            raise ConfigError("MSAU kernel_set must not be empty")
        for k in tuple(self.kernel_set) + (self.gate_kernel,):
            if k < 1 or k % 2 == 0:
                raise ConfigError(f"MSAU kernel sizes must be odd, got {k}")
        if self.channel_reduction < 1:
            raise ConfigError(f"channel_reduction must be >= 1, got {self.channel_reduction}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"Unknown norm_kind '{self.norm_kind}'")
        return self

    @property
    def hidden(self):
        return self.channels // 2

    @property
    def reduced(self):
        return max(1, self.channels // self.channel_reduction)

    def param_count(self):
        c, h, cr = self.channels, self.hidden, self.reduced
        norm = 2 if self.norm_kind == "batch" else 0
        reduce = c * h + norm * h
        branches = sum(k * k * h + h * h + norm * h for k in self.kernel_set)
        gate = self.gate_kernel * c + c * h + h * h + h
        expand = h * c + c
        channel = 9 * c + norm * c + c * cr + cr + cr * c + c
        return reduce + branches + gate + expand + channel

    def to_dict(self):
        return asdict(self)


class DepthSeparableBranch(nn.Module):
    """Depth-wise k x k followed by point-wise 1x1 and normalisation"""

    def __init__(self, channels, kernel_size, norm_kind="batch"):
        super().__init__()
        self.depthwise = nn.Conv2d(channels, channels, kernel_size, padding=kernel_size // 2,
                                   groups=channels, bias=False)
        self.pointwise = nn.Conv2d(channels, channels, 1, bias=False)
        self.norm = make_norm(norm_kind, channels)

    def forward(self, x):
        return self.norm(self.pointwise(self.depthwise(x)))


class MSAU(nn.Module):
    """
    Y = x + X2 * (X3 + X4)

    X1 sums the depth-separable branches fed by one shared 1x1 reduce, X2
    expands X1 scaled by a width-wise gate built from the height-pooled input,
    X3/X4 are the average- and max-pooled channel descriptors of a shared
    depth-wise 3x3 conv.
    """

    def __init__(self, cfg: MSAUConfig):
        super().__init__()
        self.cfg = cfg.validate()
        c, h, cr, nk = cfg.channels, cfg.hidden, cfg.reduced, cfg.norm_kind

        self.reduce = nn.Conv2d(c, h, 1, bias=False)
        self.reduce_norm = make_norm(nk, h)
        self.branches = nn.ModuleList([DepthSeparableBranch(h, k, nk) for k in cfg.kernel_set])

        gk = cfg.gate_kernel
        self.gate_pool = nn.AdaptiveAvgPool2d((1, None))
        # the pooled map is a single row, so the gate kernel is a 1 x gk strip
        self.gate_depthwise = nn.Conv2d(c, c, (1, gk), padding=(0, gk // 2), groups=c, bias=False)
        self.gate_pointwise = nn.Conv2d(c, h, 1, bias=False)
        self.gate_proj = nn.Conv2d(h, h, 1, bias=True)
        self.sigmoid = nn.Sigmoid()
        self.expand = nn.Conv2d(h, c, 1, bias=True)

        # replicate padding keeps a constant map constant
        self.context = nn.Conv2d(c, c, 3, padding=1, groups=c, bias=False, padding_mode="replicate")
        self.context_norm = make_norm(nk, c)
        self.avg_pool = nn.AdaptiveAvgPool2d(1)
        self.max_pool = nn.AdaptiveMaxPool2d(1)
        self.mlp = nn.Sequential(
            nn.Conv2d(c, cr, 1, bias=True),
            nn.ReLU(inplace=False),
            nn.Conv2d(cr, c, 1, bias=True),
        )

    def _check(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.channels:
            raise ConfigError(f"MSAU expects (B, {self.cfg.channels}, H, W), got {tuple(x.shape)}")

    def multi_scale(self, x):
        reduced = self.reduce_norm(self.reduce(x))
        out = self.branches[0](reduced)
        for branch in self.branches[1:]:
            out = out + branch(reduced)
        return out

    def spatial_gate(self, x):
        """Width-wise gate (B, C/2, 1, W) from the height-pooled raw input"""
        self._check(x)
        pooled = self.gate_pool(x)
        return self.sigmoid(self.gate_proj(self.gate_pointwise(self.gate_depthwise(pooled))))

    def channel_aggregation(self, x):
        """Average- and max-pooled channel descriptors, each (B, C, 1, 1)"""
        self._check(x)
        context = self.context_norm(self.context(x))
        return self.mlp(self.avg_pool(context)), self.mlp(self.max_pool(context))

    def forward(self, x):
        self._check(x)
        x1 = self.multi_scale(x)
        x2 = self.expand(x1 * self.spatial_gate(x))
        x3, x4 = self.channel_aggregation(x)
        return x + x2 * (x3 + x4)
