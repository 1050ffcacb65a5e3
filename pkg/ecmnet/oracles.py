# ecmnet/oracles.py
"""
Straight-line reference computations and a finite-difference gradient checker.

Each oracle re-derives a block's output from its weights with primitive
functional ops, one step at a time, so tests and the selfcheck command can
compare it against the module implementation. Normalisation layers are
evaluated with their running statistics (eval-mode semantics).
"""
import math

import torch
import torch.nn as nn
import torch.nn.functional as F

from ecmnet.ffm import NUM_DIRECTIONS


def _norm(x, norm):
    if isinstance(norm, nn.Identity):
        return x
    shape = (1, -1, 1, 1)
    scale = norm.weight.view(shape) / torch.sqrt(norm.running_var.view(shape) + norm.eps)
    return (x - norm.running_mean.view(shape)) * scale + norm.bias.view(shape)


def _sigmoid(z):
    return 1.0 / (1.0 + torch.exp(-z))


def _conv(x, conv, **overrides):
    kwargs = dict(stride=conv.stride, padding=conv.padding, dilation=conv.dilation, groups=conv.groups)
    kwargs.update(overrides)
    return F.conv2d(x, conv.weight, conv.bias, **kwargs)


def _conv_norm_act(x, layer, relu):
    out = _norm(_conv(x, layer.conv), layer.norm)
    return torch.clamp(out, min=0) if relu else out


def shuffle_by_index(x, groups):
    """Channel shuffle from the closed-form index map"""
    channels = x.shape[1]
    per_group = channels // groups
    order = [(i % groups) * per_group + i // groups for i in range(channels)]
    return x[:, order]


def channel_attention_oracle(ca, x):
    pooled = x.mean(dim=(2, 3), keepdim=True)
    hidden = torch.clamp(F.conv2d(pooled, ca.fc1.weight, ca.fc1.bias), min=0)
    gate = _sigmoid(F.conv2d(hidden, ca.fc2.weight, ca.fc2.bias))
    return x * gate


def dual_direction_oracle(dda, x):
    channels = x.shape[1]
    pooled_h = x.mean(dim=3, keepdim=True)
    pooled_w = x.mean(dim=2, keepdim=True)
    pad = dda.conv_h.kernel_size[0] // 2
    gate_h = _sigmoid(F.conv2d(pooled_h, dda.conv_h.weight, dda.conv_h.bias, padding=(pad, 0), groups=channels))
    gate_w = _sigmoid(F.conv2d(pooled_w, dda.conv_w.weight, dda.conv_w.bias, padding=(0, pad), groups=channels))
    return x * gate_h * gate_w


def edab_oracle(block, x):
    """Reduce, 3x1, 1x3, two gated branches, three-way sum, restore, residual, shuffle"""
    trunk = _conv_norm_act(x, block.reduce, relu=True)
    trunk = _conv_norm_act(trunk, block.trunk_3x1, relu=True)
    trunk = _conv_norm_act(trunk, block.trunk_1x3, relu=True)

    local = _conv_norm_act(trunk, block.local_3x1, relu=False)
    local = _conv_norm_act(local, block.local_1x3, relu=False)
    local = channel_attention_oracle(block.channel_attention, local)

    context = _conv_norm_act(trunk, block.dilated_3x1, relu=False)
    context = _conv_norm_act(context, block.dilated_1x3, relu=False)
    context = dual_direction_oracle(block.dual_direction_attention, context)

    restored = _conv_norm_act(trunk + local + context, block.restore, relu=False)
    return shuffle_by_index(restored + x, block.cfg.shuffle_groups)


def _msau_mlp(msau, v):
    first, _, second = msau.mlp
    return F.conv2d(torch.clamp(F.conv2d(v, first.weight, first.bias), min=0), second.weight, second.bias)


def msau_oracle(msau, x):
    """Every intermediate of the unit: x1 .. x4, the gate and the output y"""
    channels = x.shape[1]
    reduced = _norm(F.conv2d(x, msau.reduce.weight), msau.reduce_norm)
    x1 = 0
    for branch in msau.branches:
        k = branch.depthwise.kernel_size[0]
        dw = F.conv2d(reduced, branch.depthwise.weight, padding=k // 2, groups=reduced.shape[1])
        x1 = x1 + _norm(F.conv2d(dw, branch.pointwise.weight), branch.norm)

    gk = msau.gate_depthwise.kernel_size[1]
    pooled = x.mean(dim=2, keepdim=True)
    gate = F.conv2d(pooled, msau.gate_depthwise.weight, padding=(0, gk // 2), groups=channels)
    gate = F.conv2d(gate, msau.gate_pointwise.weight)
    gate = _sigmoid(F.conv2d(gate, msau.gate_proj.weight, msau.gate_proj.bias))
    x2 = F.conv2d(x1 * gate, msau.expand.weight, msau.expand.bias)

    context = F.conv2d(F.pad(x, (1, 1, 1, 1), mode="replicate"), msau.context.weight, groups=channels)
    context = _norm(context, msau.context_norm)
    x3 = _msau_mlp(msau, context.mean(dim=(2, 3), keepdim=True))
    x4 = _msau_mlp(msau, context.amax(dim=(2, 3), keepdim=True))
    return {"x1": x1, "gate": gate, "x2": x2, "x3": x3, "x4": x4, "y": x + x2 * (x3 + x4)}


def scan_orders(height, width):
    """Position index lists of the four routes, in cross_scan order"""
    row_major = list(range(height * width))
    col_major = [r * width + c for c in range(width) for r in range(height)]
    return [row_major, col_major, row_major[::-1], col_major[::-1]]


def selective_scan_quadratic(u, delta, A, B, C, D=None, delta_bias=None, delta_softplus=True):
    """
    h_t = sum_{s <= t} (prod_{r = s+1..t} exp(delta_r A)) delta_s B_s u_s, materialised per t.
    Quadratic in L; shapes as in selective_scan.
    """
    batch, channels, length = u.shape
    if delta_bias is not None:
        delta = delta + delta_bias.view(1, -1, 1)
    if delta_softplus:
        delta = torch.log1p(torch.exp(delta))
    if B.dim() == 3:
        B = B.unsqueeze(1)
    if C.dim() == 3:
        C = C.unsqueeze(1)
    B = B.repeat_interleave(channels // B.shape[1], dim=1)
    C = C.repeat_interleave(channels // C.shape[1], dim=1)

    decay = torch.exp(delta.unsqueeze(-1) * A.view(1, channels, 1, -1))        # (b, d, l, n)
    drive = (delta * u).unsqueeze(-1) * B.permute(0, 1, 3, 2)                  # (b, d, l, n)
    ys = []
    for t in range(length):
        h = torch.zeros_like(drive[:, :, 0])
        carry = torch.ones_like(drive[:, :, 0])
        for s in range(t, -1, -1):
            h = h + carry * drive[:, :, s]
            carry = carry * decay[:, :, s]
        ys.append((h * C[:, :, :, t]).sum(dim=-1))
    y = torch.stack(ys, dim=-1)
    if D is not None:
        y = y + u * D.view(1, -1, 1)
    return y


def ss2d_oracle(ss2d, x):
    """Projection, explicit index-list scans, quadratic recurrences, scatter-merge, norm and output"""
    batch, _, height, width = x.shape
    length = height * width
    di, n, r = ss2d.inner_dim, ss2d.state_dim, ss2d.dt_rank

    xz = F.linear(x.permute(0, 2, 3, 1), ss2d.in_proj.weight)
    x_in, z = xz[..., :di], xz[..., di:]
    x_in = F.conv2d(x_in.permute(0, 3, 1, 2), ss2d.conv2d.weight, ss2d.conv2d.bias,
                    padding=ss2d.conv2d.padding, groups=di)
    x_in = x_in * _sigmoid(x_in)
    flat = x_in.reshape(batch, di, length)

    merged = torch.zeros_like(flat)
    for k, order in enumerate(scan_orders(height, width)):
        seq = flat[:, :, order]
        proj = torch.einsum("cd,bdl->bcl", ss2d.x_proj_weight[k], seq)
        dts, Bs, Cs = proj[:, :r], proj[:, r:r + n], proj[:, r + n:]
        dts = torch.einsum("dr,brl->bdl", ss2d.dt_projs_weight[k], dts)
        rows = slice(k * di, (k + 1) * di)
        out = selective_scan_quadratic(seq, dts, -torch.exp(ss2d.A_logs[rows]), Bs, Cs,
                                       ss2d.Ds[rows], ss2d.dt_projs_bias[k])
        merged[:, :, order] += out

    y = merged.reshape(batch, di, height, width).permute(0, 2, 3, 1)
    y = F.layer_norm(y, (di,), ss2d.out_norm.weight, ss2d.out_norm.bias, ss2d.out_norm.eps)
    y = y * (z * _sigmoid(z))
    return F.linear(y, ss2d.out_proj.weight).permute(0, 3, 1, 2)


def ffm_oracle(ffm, x_encoder, *skips):
    """Concat, fuse, SS2D, FFN, project, residual"""
    out = _norm(F.conv2d(torch.cat((x_encoder,) + skips, dim=1), ffm.fuse.weight), ffm.fuse_norm)
    for layer in ffm.layers:
        out = ss2d_oracle(layer.ss2d, out)
        ffn = layer.ffn
        hidden = F.conv2d(_norm(out, ffn.norm), ffn.fc1.weight, ffn.fc1.bias)
        hidden = 0.5 * hidden * (1.0 + torch.erf(hidden / math.sqrt(2.0)))
        out = F.conv2d(hidden, ffn.fc2.weight, ffn.fc2.bias)
    if not isinstance(ffm.project, nn.Identity):
        out = F.conv2d(out, ffm.project.weight)
    return out + x_encoder


def cross_entropy_oracle(logits, labels, weight=None, ignore_index=255):
    """Per-pixel softmax and negative log-likelihood, averaged over kept pixels (weighted mean)"""
    k = logits.shape[1]
    flat = logits.permute(0, 2, 3, 1).reshape(-1, k)
    target = labels.reshape(-1)
    total, norm = 0.0, 0.0
    for row, cls in zip(flat, target.tolist()):
        if cls == ignore_index:
            continue
        shifted = row - row.max()
        prob = torch.exp(shifted[cls]) / torch.exp(shifted).sum()
        w = 1.0 if weight is None else weight[cls]
        total = total - w * torch.log(prob)
        norm = norm + w
    return total / norm


def iou_set_oracle(pred, gt, num_classes, ignore_index=255):
    """IoU per class from explicit pixel-index sets; None where undefined"""
    pred = [int(v) for v in pred.ravel()]
    gt = [int(v) for v in gt.ravel()]
    kept = [i for i, g in enumerate(gt) if g != ignore_index]
    out = []
    for k in range(num_classes):
        predicted = {i for i in kept if pred[i] == k}
        actual = {i for i in kept if gt[i] == k}
        union = predicted | actual
        out.append(len(predicted & actual) / len(union) if union else None)
    return out


def directional_gradcheck(objective, tensors, directions=20, eps=1e-5, seed=0):
    """
    Compare reverse-mode directional derivatives with central differences.

    Args:
        objective: closure returning a scalar tensor computed from tensors
        tensors: leaf tensors (parameters and/or inputs) with requires_grad set
        directions: number of random directions
        eps: finite-difference step

    Returns:
        Largest relative error over the directions
    """
    generator = torch.Generator().manual_seed(seed)
    grads = torch.autograd.grad(objective(), tensors, allow_unused=True)
    grads = [torch.zeros_like(t) if g is None else g for t, g in zip(tensors, grads)]

    worst = 0.0
    for _ in range(directions):
        vs = [torch.randn(t.shape, generator=generator, dtype=t.dtype) for t in tensors]
        analytic = float(sum((g * v).sum() for g, v in zip(grads, vs)))
        with torch.no_grad():
            for t, v in zip(tensors, vs):
                t.add_(eps * v)
            plus = float(objective())
            for t, v in zip(tensors, vs):
                t.sub_(2 * eps * v)
            minus = float(objective())
            for t, v in zip(tensors, vs):
                t.add_(eps * v)
        numeric = (plus - minus) / (2 * eps)
        worst = max(worst, abs(analytic - numeric) / max(abs(analytic), abs(numeric), 1e-8))
    return worst


def module_gradcheck(module, inputs, directions=20, eps=1e-5, seed=0):
    """Directional gradient check of a weighted output sum w.r.t. every trainable parameter, in 64-bit"""
    module = module.double().eval()
    inputs = [t.double() for t in inputs]
    generator = torch.Generator().manual_seed(seed + 1)
    with torch.no_grad():
        weights = torch.randn(module(*inputs).shape, generator=generator, dtype=torch.float64)
    params = [p for p in module.parameters() if p.requires_grad]

    def objective():
        return (module(*inputs) * weights).sum()

    return directional_gradcheck(objective, params, directions, eps, seed)
