# ecmnet/blocks.py
"""EDAB bottleneck block, its two attention gates and the channel shuffle primitive."""
import logging
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn

from ecmnet.errors import ConfigError

logger = logging.getLogger(__name__)

NORM_KINDS = ("batch", "none")


def make_norm(norm_kind, channels):
    """BatchNorm2d (scale 1, offset 0 at init) or an identity placeholder"""
    if norm_kind == "batch":
        return nn.BatchNorm2d(channels)
    if norm_kind == "none":
        return nn.Identity()
    raise ConfigError(f"Unknown norm_kind '{norm_kind}', expected one of {NORM_KINDS}")


def channel_shuffle(x, groups):
    """
    Permute channels so output channel i reads input channel (i mod g) * (C / g) + i div g.

    Args:
        x: feature map (B, C, H, W)
        groups: number of groups g, must divide C

    Returns:
        Feature map of the same shape with channels permuted
    """
    batch, channels, height, width = x.shape
    if groups < 1 or channels % groups != 0:
        raise ConfigError(f"shuffle groups {groups} must divide channel count {channels}")
    if groups == 1:
        return x
    x = x.view(batch, groups, channels // groups, height, width)
    x = torch.transpose(x, 1, 2).contiguous()
    return x.view(batch, channels, height, width)


class ConvNormAct(nn.Module):
    """Bias-free convolution, optional normalisation, optional ReLU"""

    def __init__(self, in_channels, out_channels, kernel_size, stride=1, padding=0,
                 dilation=1, groups=1, norm_kind="batch", act=True):
        super().__init__()
        self.conv = nn.Conv2d(in_channels, out_channels, kernel_size, stride=stride,
                              padding=padding, dilation=dilation, groups=groups, bias=False)
        self.norm = make_norm(norm_kind, out_channels)
        self.act = nn.ReLU(inplace=False) if act else nn.Identity()

    def forward(self, x):
        return self.act(self.norm(self.conv(x)))


@dataclass(frozen=True)
class EDABConfig:
    channels: int
    dilation_rate: int = 1
    norm_kind: str = "batch"
    shuffle_groups: int = 2
    attention_reduction: int = 4

    def validate(self):
        if self.channels < 2 or self.channels % 2 != 0:
            raise ConfigError(f"EDAB channels must be even and positive, got {self.channels}")
        if self.dilation_rate < 1:
            raise ConfigError(f"EDAB dilation_rate must be >= 1, got {self.dilation_rate}")
        if self.shuffle_groups < 1 or self.channels % self.shuffle_groups != 0:
            raise ConfigError(
                f"shuffle_groups {self.shuffle_groups} must divide channels {self.channels}"
            )
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"Unknown norm_kind '{self.norm_kind}'")
        return self

    @property
    def hidden(self):
        return self.channels // 2

    @property
    def attention_hidden(self):
        return max(1, self.hidden // self.attention_reduction)

    def param_count(self):
        """Closed form of the trainable scalars an EDAB with this config owns"""
        c, h, q = self.channels, self.hidden, self.attention_hidden
        norm = 2 if self.norm_kind == "batch" else 0
        convs = c * h + 6 * h * h + 12 * h + h * c
        channel_attention = 2 * h * q + q + h
        dual_direction = 2 * (3 * h + h)
        norms = norm * (7 * h + c)
        return convs + channel_attention + dual_direction + norms

    def to_dict(self):
        return asdict(self)


class ChannelAttention(nn.Module):
    """Squeeze-excite gate: global average pool, bottleneck MLP, sigmoid, per-channel scale"""

    def __init__(self, channels, reduction=4):
        super().__init__()
        hidden = max(1, channels // reduction)
        self.pool = nn.AdaptiveAvgPool2d(1)
        self.fc1 = nn.Conv2d(channels, hidden, 1, bias=True)
        self.act = nn.ReLU(inplace=False)
        self.fc2 = nn.Conv2d(hidden, channels, 1, bias=True)
        self.sigmoid = nn.Sigmoid()

    def gate(self, x):
        return self.sigmoid(self.fc2(self.act(self.fc1(self.pool(x)))))

    def forward(self, x):
        return x * self.gate(x)


class DualDirectionAttention(nn.Module):
    """Two strip gates: one from pooling over width (B,C,H,1), one from pooling over height (B,C,1,W)"""

    def __init__(self, channels, kernel_size=3):
        super().__init__()
        pad = kernel_size // 2
        self.pool_h = nn.AdaptiveAvgPool2d((None, 1))
        self.pool_w = nn.AdaptiveAvgPool2d((1, None))
        self.conv_h = nn.Conv2d(channels, channels, (kernel_size, 1), padding=(pad, 0),
                                groups=channels, bias=True)
        self.conv_w = nn.Conv2d(channels, channels, (1, kernel_size), padding=(0, pad),
                                groups=channels, bias=True)
        self.sigmoid = nn.Sigmoid()

    def gates(self, x):
        gate_h = self.sigmoid(self.conv_h(self.pool_h(x)))
        gate_w = self.sigmoid(self.conv_w(self.pool_w(x)))
        return gate_h, gate_w

    def forward(self, x):
        gate_h, gate_w = self.gates(x)
        return x * gate_h * gate_w


class EDAB(nn.Module):
    """
    Enhanced dual-attention bottleneck.

    1x1 reduce to C/2, factorised 3x1/1x3 trunk, then two depth-wise factorised
    branches (plain + channel attention, dilated + dual-direction attention).
    Trunk and branches are summed, restored to C by a 1x1 conv, added to the
    input and channel-shuffled.
    """

    def __init__(self, cfg: EDABConfig):
        super().__init__()
        self.cfg = cfg.validate()
        c, h, r, nk = cfg.channels, cfg.hidden, cfg.dilation_rate, cfg.norm_kind

        self.reduce = ConvNormAct(c, h, 1, norm_kind=nk)
        self.trunk_3x1 = ConvNormAct(h, h, (3, 1), padding=(1, 0), norm_kind=nk)
        self.trunk_1x3 = ConvNormAct(h, h, (1, 3), padding=(0, 1), norm_kind=nk)

        self.local_3x1 = ConvNormAct(h, h, (3, 1), padding=(1, 0), groups=h, norm_kind=nk, act=False)
        self.local_1x3 = ConvNormAct(h, h, (1, 3), padding=(0, 1), groups=h, norm_kind=nk, act=False)
        self.channel_attention = ChannelAttention(h, cfg.attention_reduction)

        self.dilated_3x1 = ConvNormAct(h, h, (3, 1), padding=(r, 0), dilation=(r, 1), groups=h,
                                       norm_kind=nk, act=False)
        self.dilated_1x3 = ConvNormAct(h, h, (1, 3), padding=(0, r), dilation=(1, r), groups=h,
                                       norm_kind=nk, act=False)
        self.dual_direction_attention = DualDirectionAttention(h)

        self.restore = ConvNormAct(h, c, 1, norm_kind=nk, act=False)

    def forward(self, x):
        if x.dim() != 4 or x.shape[1] != self.cfg.channels:
            raise ConfigError(
                f"EDAB expects (B, {self.cfg.channels}, H, W), got {tuple(x.shape)}"
            )
        trunk = self.trunk_1x3(self.trunk_3x1(self.reduce(x)))
        local = self.channel_attention(self.local_1x3(self.local_3x1(trunk)))
        context = self.dual_direction_attention(self.dilated_1x3(self.dilated_3x1(trunk)))
        out = self.restore(trunk + local + context)
        return channel_shuffle(out + x, self.cfg.shuffle_groups)


class DownsamplingBlock(nn.Module):
    """Stride-2 transition: conv to the extra channels concatenated with a max-pooled copy when widening"""

    def __init__(self, in_channels, out_channels, norm_kind="batch"):
        super().__init__()
        self.in_channels = in_channels
        self.out_channels = out_channels
        self.widen = out_channels > in_channels
        conv_out = out_channels - in_channels if self.widen else out_channels
        self.conv = nn.Conv2d(in_channels, conv_out, 3, stride=2, padding=1, bias=False)
        self.pool = nn.MaxPool2d(2, stride=2) if self.widen else None
        self.norm = make_norm(norm_kind, out_channels)
        self.act = nn.ReLU(inplace=False)

    def forward(self, x):
        out = self.conv(x)
        if self.pool is not None:
            out = torch.cat([out, self.pool(x)], dim=1)
        return self.act(self.norm(out))
