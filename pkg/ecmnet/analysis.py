# ecmnet/analysis.py
"""Parameter counting, hook-based FLOP accounting and latency measurement."""
import logging
import os
import platform
import statistics
import time
from dataclasses import dataclass, field

import pandas as pd
import plotly.graph_objects as go
import toml
import torch
import torch.nn as nn
from fvcore.nn import parameter_count
from fvcore.nn.jit_handles import conv_flop_count

from ecmnet.blocks import EDAB, ChannelAttention, DualDirectionAttention
from ecmnet.ffm import FFM, NUM_DIRECTIONS, SS2D
from ecmnet.model import ECMNet, NETWORK_STRIDE
from ecmnet.msau import MSAU

logger = logging.getLogger(__name__)

DEFAULT_FLOPS_PER_MAC = 2


# Leaf layers ------------------------------------------------------------------

def count_conv2d(m, x, y, mac):
    """fvcore's conv MAC count times mac, plus one add per output for the bias"""
    total = mac * int(conv_flop_count(list(x[0].shape), list(m.weight.shape), list(y.shape)))
    if m.bias is not None:
        total += y.numel()
    return total


def count_linear(m, x, y, mac):
    """A linear layer is a 1x1 conv over the flattened leading dims"""
    rows = y.numel() // m.out_features
    total = mac * int(conv_flop_count([rows, m.in_features], list(m.weight.shape), [rows, m.out_features]))
    if m.bias is not None:
        total += y.numel()
    return total


def count_elementwise(m, x, y, mac):
    """Activations: one op per output element"""
    return y.numel()


def count_pool(m, x, y, mac):
    """Pooling: one op per input element"""
    return x[0].numel()


def count_upsample(m, x, y, mac):
    return y.numel()


def count_zero(m, x, y, mac):
    """Normalisation folds into the neighbouring conv at inference"""
    return 0


# Composite blocks: only the functional ops not covered by their child modules -----

def count_edab(m, x, y, mac):
    batch, channels, height, width = x[0].shape
    hidden = m.cfg.hidden
    # trunk + two branches, then the residual add
    return batch * height * width * (2 * hidden + channels)


def count_channel_attention(m, x, y, mac):
    return x[0].numel()


def count_dual_direction(m, x, y, mac):
    return 2 * x[0].numel()


def count_msau(m, x, y, mac):
    batch, channels, height, width = x[0].shape
    hidden = m.cfg.hidden
    branch_sums = (len(m.branches) - 1) * hidden * height * width
    gating = hidden * height * width
    descriptors = channels
    rescale_and_residual = 2 * channels * height * width
    return batch * (branch_sums + gating + descriptors + rescale_and_residual)


def count_ss2d(m, x, y, mac):
    """
    Projections, softplus, the recurrence and the merge.

    Per (direction, channel, state, step): delta*A, exp, delta*B*u (2), and two
    multiply-adds for the state update and the readout. Per (direction, channel,
    step): one multiply-add for the D skip.
    """
    batch, _, height, width = x[0].shape
    length = height * width
    k, di, n, r = NUM_DIRECTIONS, m.inner_dim, m.state_dim, m.dt_rank
    projections = mac * k * di * (r + 2 * n) * length + mac * k * di * r * length
    softplus = 2 * k * di * length
    scan = (4 + 2 * mac) * k * di * n * length + mac * k * di * length
    merge = 3 * di * length
    gating = 2 * di * length
    return batch * (projections + softplus + scan + merge + gating)


def count_ffm(m, x, y, mac):
    return y.numel()


def count_ecmnet(m, x, y, mac):
    """Long-connection adds and the final bilinear resize"""
    batch, _, height, width = x[0].shape
    padded_h = height + (-height) % NETWORK_STRIDE
    padded_w = width + (-width) % NETWORK_STRIDE
    total = batch * m.cfg.num_classes * padded_h * padded_w
    for i, width_i in enumerate(m.cfg.stage_channels):
        if m.active.connections[i]:
            scale = 2 ** (i + 2)
            total += batch * width_i * (padded_h // scale) * (padded_w // scale)
    return total


FLOP_RULES = {
    nn.Conv2d: count_conv2d,
    nn.Linear: count_linear,
    nn.ReLU: count_elementwise,
    nn.SiLU: count_elementwise,
    nn.GELU: count_elementwise,
    nn.Sigmoid: count_elementwise,
    nn.AdaptiveAvgPool2d: count_pool,
    nn.AdaptiveMaxPool2d: count_pool,
    nn.AvgPool2d: count_pool,
    nn.MaxPool2d: count_pool,
    nn.Upsample: count_upsample,
    nn.BatchNorm2d: count_zero,
    nn.LayerNorm: count_zero,
    nn.Identity: count_zero,
    EDAB: count_edab,
    ChannelAttention: count_channel_attention,
    DualDirectionAttention: count_dual_direction,
    MSAU: count_msau,
    SS2D: count_ss2d,
    FFM: count_ffm,
    ECMNet: count_ecmnet,
}


@dataclass
class LatencyStats:
    samples: list
    warmup: int
    input_size: tuple
    hardware: str

    @property
    def median(self):
        return statistics.median(self.samples)

    @property
    def spread(self):
        """Interquartile range, or the full range for fewer than four samples"""
        if len(self.samples) < 4:
            return max(self.samples) - min(self.samples)
        q = statistics.quantiles(self.samples, n=4)
        return q[2] - q[0]

    def to_dict(self):
        return {
            "samples_s": list(self.samples),
            "median_s": self.median,
            "spread_s": self.spread,
            "warmup": self.warmup,
            "input_size": list(self.input_size),
            "hardware": self.hardware,
        }


@dataclass
class BudgetReport:
    total_params: int
    params_by_module: dict
    flops: int = 0
    flops_by_module: dict = field(default_factory=dict)
    input_size: tuple = None
    flops_per_mac: int = DEFAULT_FLOPS_PER_MAC
    variant: str = ""
    latency: LatencyStats = None

    def to_frame(self, depth=1):
        """Params and FLOPs per module path, truncated to depth levels"""
        params = _aggregate(self.params_by_module, depth)
        flops = _aggregate(self.flops_by_module, depth)
        names = sorted(set(params) | set(flops))
        rows = [{"module": name or "(total)", "params": params.get(name, 0), "flops": flops.get(name, 0)}
                for name in names]
        return pd.DataFrame(rows, columns=["module", "params", "flops"])

    def summary(self):
        lines = [
            f"variant: {self.variant or '-'}",
            f"params: {self.total_params:,} ({self.total_params / 1e6:.3f} M)",
        ]
        if self.input_size:
            lines.append(
                f"flops @ {self.input_size[0]}x{self.input_size[1]}: {self.flops:,} "
                f"({self.flops / 1e9:.3f} G, MAC = {self.flops_per_mac} FLOPs)"
            )
        if self.latency is not None:
            lines.append(f"latency: median {self.latency.median * 1e3:.2f} ms, "
                         f"spread {self.latency.spread * 1e3:.2f} ms on {self.latency.hardware}")
        return "\n".join(lines)

    def to_dict(self):
        data = {
            "variant": self.variant,
            "total_params": int(self.total_params),
            "flops": int(self.flops),
            "flops_per_mac": self.flops_per_mac,
            "input_size": list(self.input_size) if self.input_size else [],
        }
        if self.latency is not None:
            data["latency"] = self.latency.to_dict()
        return data

    def to_toml(self, depth=1):
        data = self.to_dict()
        data["modules"] = {
            (row["module"] if row["module"] != "(total)" else "total"): {
                "params": int(row["params"]), "flops": int(row["flops"])}
            for _, row in self.to_frame(depth).iterrows()
        }
        return toml.dumps(data)

    def write_chart(self, path, depth=1):
        """Bar chart of params and FLOPs per module as standalone HTML"""
        df = self.to_frame(depth)
        df = df[df["module"] != "(total)"]
        fig = go.Figure()
        fig.add_trace(go.Bar(x=df["module"], y=df["params"], name="params"))
        fig.add_trace(go.Bar(x=df["module"], y=df["flops"] / 1e3, name="kFLOPs", yaxis="y2", opacity=0.6))
        fig.update_layout(
            title=f"Budget {self.variant}".strip(),
            yaxis=dict(title="params"),
            yaxis2=dict(title="kFLOPs", overlaying="y", side="right"),
            barmode="group",
        )
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.write_html(path)
        return path


def _aggregate(by_module, depth):
    """Keep the total ("") and every path at most depth levels deep; values include descendants"""
    return {name: value for name, value in by_module.items()
            if name == "" or len(name.split(".")) <= depth}


def count_params(model):
    """
    Trainable scalars in total and per module path.

    Returns:
        (total, {path: count}) where every path includes its descendants and "" is the model
    """
    trainable = {name for name, p in model.named_parameters() if p.requires_grad}
    counts = dict(parameter_count(model))
    frozen = [name for name, _ in model.named_parameters() if name not in trainable]
    for name in frozen:
        numel = model.get_parameter(name).numel()
        parts = name.split(".")
        for i in range(len(parts) + 1):
            prefix = ".".join(parts[:i])
            counts[prefix] = counts.get(prefix, 0) - numel
    total = int(counts.get("", 0))
    return total, {name: int(v) for name, v in counts.items()}


def count_flops(model, input_size, flops_per_mac=DEFAULT_FLOPS_PER_MAC, batch=1):
    """
    FLOPs of one forward pass at input_size (H, W).

    Returns:
        (total, {module path: own FLOPs}) where own FLOPs exclude children
    """
    if flops_per_mac not in (1, 2):
        raise ValueError(f"flops_per_mac must be 1 or 2, got {flops_per_mac}")
    own = {}
    handles = []

    def make_hook(name, rule):
        def hook(module, inputs, output):
            own[name] = own.get(name, 0) + int(rule(module, inputs, output, flops_per_mac))
        return hook

    for name, module in model.named_modules():
        rule = FLOP_RULES.get(type(module))
        if rule is not None:
            handles.append(module.register_forward_hook(make_hook(name, rule)))

    was_training = model.training
    model.eval()
    try:
        param = next(model.parameters(), None)
        dtype = param.dtype if param is not None else torch.float32
        device = param.device if param is not None else torch.device("cpu")
        x = torch.zeros(batch, 3, *input_size, dtype=dtype, device=device)
        with torch.no_grad():
            model(x)
    finally:
        for handle in handles:
            handle.remove()
        model.train(was_training)

    return sum(own.values()), own


def _with_ancestors(own):
    """Roll own FLOPs up so every path includes its descendants"""
    rolled = {}
    for name, value in own.items():
        parts = name.split(".") if name else []
        for i in range(len(parts) + 1):
            prefix = ".".join(parts[:i])
            rolled[prefix] = rolled.get(prefix, 0) + value
    return rolled


def hardware_descriptor():
    parts = [platform.platform(), platform.processor() or platform.machine(),
             f"torch {torch.__version__}", f"threads {torch.get_num_threads()}"]
    if torch.cuda.is_available():
        parts.append(torch.cuda.get_device_name(0))
    return ", ".join(parts)


def benchmark_latency(model, input_size, trials=5, warmup=2, batch=1):
    """Wall-clock forward latency after warmup runs; no cross-hardware claims"""
    if trials < 3:
        raise ValueError(f"Latency needs at least 3 trials, got {trials}")
    param = next(model.parameters(), None)
    device = param.device if param is not None else torch.device("cpu")
    x = torch.randn(batch, 3, *input_size, device=device)
    was_training = model.training
    model.eval()
    samples = []
    try:
        with torch.no_grad():
            for _ in range(warmup):
                model(x)
            for _ in range(trials):
                if device.type == "cuda":
                    torch.cuda.synchronize()
                start = time.perf_counter()
                model(x)
                if device.type == "cuda":
                    torch.cuda.synchronize()
                samples.append(time.perf_counter() - start)
    finally:
        model.train(was_training)
    return LatencyStats(samples=samples, warmup=warmup, input_size=tuple(input_size),
                        hardware=hardware_descriptor())


def analyze(model, input_size=None, flops_per_mac=DEFAULT_FLOPS_PER_MAC, latency_trials=0,
            latency_warmup=2, variant=""):
    """Full budget report for a built model"""
    total, by_module = count_params(model)
    report = BudgetReport(total_params=total, params_by_module=by_module,
                          flops_per_mac=flops_per_mac, variant=variant)
    if input_size is not None:
        flops, own = count_flops(model, input_size, flops_per_mac)
        report.flops = flops
        report.flops_by_module = _with_ancestors(own)
        report.input_size = tuple(input_size)
        if latency_trials:
            report.latency = benchmark_latency(model, input_size, latency_trials, latency_warmup)
    logger.info(f"Budget {variant or 'model'}: params={total:,} flops={report.flops:,}")
    return report
