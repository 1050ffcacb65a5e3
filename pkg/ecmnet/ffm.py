# ecmnet/ffm.py
"""Feature fusion module: four-direction selective scan (SS2D) followed by a feed-forward network."""
import logging
import math
from dataclasses import asdict, dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F
from einops import rearrange, repeat

from ecmnet.blocks import NORM_KINDS, make_norm
from ecmnet.errors import ConfigError, NumericalError

logger = logging.getLogger(__name__)

NUM_DIRECTIONS = 4


def cross_scan(x):
    """
    Flatten a feature map along four routes.

    Args:
        x: (B, C, H, W)

    Returns:
        (B, 4, C, H*W): row-major, column-major, reversed row-major, reversed column-major
    """
    row_major = x.flatten(2, 3)
    col_major = x.transpose(2, 3).flatten(2, 3)
    forward = torch.stack([row_major, col_major], dim=1)
    return torch.cat([forward, torch.flip(forward, dims=[-1])], dim=1)


def cross_merge(ys, height, width):
    """
    Undo each route of cross_scan and sum the four results.

    Args:
        ys: (B, 4, C, H*W)
        height, width: grid the sequences came from

    Returns:
        (B, C, H, W)
    """
    batch, directions, channels, length = ys.shape
    if directions != NUM_DIRECTIONS or length != height * width:
        raise ConfigError(
            f"cross_merge expects (B, 4, C, {height * width}), got {tuple(ys.shape)}"
        )
    ys = ys[:, 0:2] + torch.flip(ys[:, 2:4], dims=[-1])
    row_major = ys[:, 0].view(batch, channels, height, width)
    col_major = ys[:, 1].view(batch, channels, width, height).transpose(2, 3)
    return row_major + col_major


def _check_finite(**tensors):
    for name, tensor in tensors.items():
        if tensor is not None and not torch.isfinite(tensor).all():
            raise NumericalError(f"selective_scan received non-finite values in '{name}'")


def _expand_groups(mat, channels):
    """Broadcast (B, N, L) or (B, G, N, L) input-dependent projections to (B, channels, N, L)"""
    if mat.dim() == 3:
        mat = mat.unsqueeze(1)
    groups = mat.shape[1]
    if channels % groups != 0:
        raise ConfigError(f"{groups} projection groups do not divide {channels} scan channels")
    return mat.repeat_interleave(channels // groups, dim=1)


def selective_scan(u, delta, A, B, C, D=None, delta_bias=None, delta_softplus=True):
    """
    Left-to-right selective state-space recurrence.

        h_t = exp(delta_t * A) h_{t-1} + delta_t * B_t * u_t
        y_t = <C_t, h_t> + D * u_t

    Args:
        u: input (B, D, L)
        delta: step sizes before the optional bias/softplus (B, D, L)
        A: state matrix (D, N), negative for a decaying state
        B, C: input-dependent projections (B, N, L) or grouped (B, G, N, L)
        D: skip coefficient (D,)
        delta_bias: added to delta before softplus (D,)
        delta_softplus: apply softplus so every step is positive

    Returns:
        y (B, D, L) in the dtype of u
    """
    _check_finite(u=u, delta=delta, A=A, B=B, C=C, D=D, delta_bias=delta_bias)
    batch, channels, length = u.shape
    if delta.shape != u.shape:
        raise ConfigError(f"delta shape {tuple(delta.shape)} does not match u {tuple(u.shape)}")

    if delta_bias is not None:
        delta = delta + delta_bias.view(1, -1, 1)
    if delta_softplus:
        delta = F.softplus(delta)

    B = _expand_groups(B, channels)
    C = _expand_groups(C, channels)
    delta_A = torch.exp(torch.einsum("bdl,dn->bdln", delta, A))
    delta_B_u = torch.einsum("bdl,bdnl,bdl->bdln", delta, B, u)

    h = u.new_zeros(batch, channels, A.shape[1])
    ys = []
    for i in range(length):
        h = delta_A[:, :, i] * h + delta_B_u[:, :, i]
        ys.append(torch.einsum("bdn,bdn->bd", h, C[:, :, :, i]))
    y = torch.stack(ys, dim=2)
    if D is not None:
        y = y + u * D.view(1, -1, 1)

    if not torch.isfinite(y).all():
        raise NumericalError("selective_scan produced non-finite output")
    return y


@dataclass(frozen=True)
class FFMConfig:
    fused_channels: int
    out_channels: int
    model_dim: int = 80
    state_dim: int = 8
    expansion: int = 2
    ssm_ratio: int = 2
    dt_rank: int = 0
    depth: int = 1
    norm_kind: str = "batch"

    def validate(self):
        for name in ("fused_channels", "out_channels", "model_dim", "state_dim",
                     "expansion", "ssm_ratio", "depth"):
            if getattr(self, name) < 1:
                raise ConfigError(f"FFM {name} must be positive, got {getattr(self, name)}")
        if self.dt_rank < 0:
            raise ConfigError(f"FFM dt_rank must be >= 0 (0 = auto), got {self.dt_rank}")
        if self.norm_kind not in NORM_KINDS:
            raise ConfigError(f"Unknown norm_kind '{self.norm_kind}'")
        return self

    @property
    def inner_dim(self):
        return self.ssm_ratio * self.model_dim

    @property
    def rank(self):
        return self.dt_rank or math.ceil(self.model_dim / 16)

    def ss2d_param_count(self):
        m, di, n, r, k = self.model_dim, self.inner_dim, self.state_dim, self.rank, NUM_DIRECTIONS
        return (m * 2 * di + 10 * di + k * (r + 2 * n) * di + k * di * r + k * di
                + k * di * n + k * di + 2 * di + di * m)

    def ffn_param_count(self):
        m, hidden = self.model_dim, self.expansion * self.model_dim
        norm = 2 * m if self.norm_kind == "batch" else 0
        return norm + m * hidden + hidden + hidden * m + m

    def param_count(self):
        m = self.model_dim
        norm = 2 * m if self.norm_kind == "batch" else 0
        fuse = self.fused_channels * m + norm
        project = 0 if self.out_channels == m else m * self.out_channels
        return fuse + self.depth * (self.ss2d_param_count() + self.ffn_param_count()) + project

    def to_dict(self):
        return asdict(self)


class SS2D(nn.Module):
    """
    2D selective scan on a channel-first feature map.

    in_proj -> depth-wise 3x3 + SiLU -> cross_scan -> per-direction selective
    scan -> cross_merge -> LayerNorm -> gate with SiLU(z) -> out_proj.
    """

    def __init__(self, model_dim, state_dim=8, ssm_ratio=2, dt_rank=0, d_conv=3,
                 dt_min=0.001, dt_max=0.1, dt_init_floor=1e-4):
        super().__init__()
        self.model_dim = model_dim
        self.state_dim = state_dim
        self.inner_dim = ssm_ratio * model_dim
        self.dt_rank = dt_rank or math.ceil(model_dim / 16)
        k, di = NUM_DIRECTIONS, self.inner_dim

        self.in_proj = nn.Linear(model_dim, 2 * di, bias=False)
        self.conv2d = nn.Conv2d(di, di, d_conv, padding=(d_conv - 1) // 2, groups=di, bias=True)
        self.act = nn.SiLU()

        self.x_proj_weight = nn.Parameter(
            torch.stack([nn.Linear(di, self.dt_rank + 2 * state_dim, bias=False).weight
                         for _ in range(k)], dim=0)
        )
        dt_projs = [self._dt_init(self.dt_rank, di, dt_min, dt_max, dt_init_floor) for _ in range(k)]
        self.dt_projs_weight = nn.Parameter(torch.stack([t.weight for t in dt_projs], dim=0))
        self.dt_projs_bias = nn.Parameter(torch.stack([t.bias for t in dt_projs], dim=0))

        # S4D real initialisation: A = -(1..N) per channel, D = 1
        a_init = repeat(torch.arange(1, state_dim + 1, dtype=torch.float32), "n -> d n", d=k * di)
        self.A_logs = nn.Parameter(torch.log(a_init).contiguous())
        self.Ds = nn.Parameter(torch.ones(k * di))

        self.out_norm = nn.LayerNorm(di)
        self.out_proj = nn.Linear(di, model_dim, bias=False)

    @staticmethod
    def _dt_init(dt_rank, inner_dim, dt_min, dt_max, dt_init_floor):
        dt_proj = nn.Linear(dt_rank, inner_dim, bias=True)
        dt_init_std = dt_rank ** -0.5
        nn.init.uniform_(dt_proj.weight, -dt_init_std, dt_init_std)
        # softplus(bias) lands log-uniformly in [dt_min, dt_max]
        dt = torch.exp(
            torch.rand(inner_dim) * (math.log(dt_max) - math.log(dt_min)) + math.log(dt_min)
        ).clamp(min=dt_init_floor)
        inv_dt = dt + torch.log(-torch.expm1(-dt))
        with torch.no_grad():
            dt_proj.bias.copy_(inv_dt)
        return dt_proj

    def project_input(self, x):
        """(B, C, H, W) -> scan input (B, inner, H, W) and gate branch z (B, H, W, inner)"""
        xz = self.in_proj(rearrange(x, "b c h w -> b h w c"))
        x_in, z = xz.chunk(2, dim=-1)
        x_in = self.act(self.conv2d(rearrange(x_in, "b h w c -> b c h w").contiguous()))
        return x_in, z

    def scan_directions(self, xs):
        """Selective scan of the four cross-scanned sequences (B, 4, inner, L)"""
        batch, k, di, length = xs.shape
        n, r = self.state_dim, self.dt_rank
        x_dbl = torch.einsum("bkdl,kcd->bkcl", xs, self.x_proj_weight)
        dts, Bs, Cs = torch.split(x_dbl, [r, n, n], dim=2)
        dts = torch.einsum("bkrl,kdr->bkdl", dts, self.dt_projs_weight)
        ys = selective_scan(
            xs.reshape(batch, k * di, length),
            dts.reshape(batch, k * di, length),
            -torch.exp(self.A_logs),
            Bs, Cs, self.Ds,
            delta_bias=self.dt_projs_bias.reshape(-1),
            delta_softplus=True,
        )
        return ys.view(batch, k, di, length)

    def finish(self, merged, z):
        """Normalise merged (B, inner, H, W), gate with SiLU(z), project back to (B, C, H, W)"""
        y = self.out_norm(rearrange(merged, "b c h w -> b h w c"))
        y = y * F.silu(z)
        return rearrange(self.out_proj(y), "b h w c -> b c h w").contiguous()

    def forward(self, x):
        height, width = x.shape[-2:]
        x_in, z = self.project_input(x)
        ys = self.scan_directions(cross_scan(x_in))
        return self.finish(cross_merge(ys, height, width), z)


class FFN(nn.Module):
    """Pre-normalised 1x1 expand, GELU, 1x1 contract"""

    def __init__(self, channels, expansion=2, norm_kind="batch"):
        super().__init__()
        hidden = expansion * channels
        self.norm = make_norm(norm_kind, channels)
        self.fc1 = nn.Conv2d(channels, hidden, 1, bias=True)
        self.act = nn.GELU()
        self.fc2 = nn.Conv2d(hidden, channels, 1, bias=True)

    def forward(self, x):
        return self.fc2(self.act(self.fc1(self.norm(x))))


class FFMLayer(nn.Module):
    def __init__(self, cfg: FFMConfig):
        super().__init__()
        self.ss2d = SS2D(cfg.model_dim, cfg.state_dim, cfg.ssm_ratio, cfg.rank)
        self.ffn = FFN(cfg.model_dim, cfg.expansion, cfg.norm_kind)

    def forward(self, x):
        return self.ffn(self.ss2d(x))


class FFM(nn.Module):
    """
    Y = FFN(SS2D(fuse(concat(x_encoder, skips...)))) projected to the encoder width, plus x_encoder.
    """

    def __init__(self, cfg: FFMConfig):
        super().__init__()
        self.cfg = cfg.validate()
        self.fuse = nn.Conv2d(cfg.fused_channels, cfg.model_dim, 1, bias=False)
        self.fuse_norm = make_norm(cfg.norm_kind, cfg.model_dim)
        self.layers = nn.ModuleList([FFMLayer(cfg) for _ in range(cfg.depth)])
        if cfg.out_channels == cfg.model_dim:
            self.project = nn.Identity()
        else:
            self.project = nn.Conv2d(cfg.model_dim, cfg.out_channels, 1, bias=False)

    def forward(self, x_encoder, *skips):
        inputs = (x_encoder,) + skips
        size = x_encoder.shape[-2:]
        for i, feature in enumerate(skips, start=1):
            if feature.shape[-2:] != size:
                raise ConfigError(
                    f"FFM input {i} has spatial size {tuple(feature.shape[-2:])}, "
                    f"expected {tuple(size)} to match the encoder feature"
                )
        channels = sum(t.shape[1] for t in inputs)
        if channels != self.cfg.fused_channels:
            raise ConfigError(
                f"FFM inputs carry {channels} channels, configured for {self.cfg.fused_channels}"
            )
        if x_encoder.shape[1] != self.cfg.out_channels:
            raise ConfigError(
                f"FFM encoder feature has {x_encoder.shape[1]} channels, expected {self.cfg.out_channels}"
            )

        out = self.fuse_norm(self.fuse(torch.cat(inputs, dim=1)))
        for layer in self.layers:
            out = layer(out)
        return self.project(out) + x_encoder
