# ecmnet/selfcheck.py
"""
Oracle and gradient suites behind the `selfcheck` command.

Every suite returns {"suite", "success", "message", "seconds"} and never raises
for a failed check.
"""
import logging
import time
from contextlib import nullcontext
from unittest import mock

import numpy as np
import torch

from ecmnet import ffm, oracles
from ecmnet.blocks import EDAB, EDABConfig, channel_shuffle
from ecmnet.metrics import ConfusionMatrix, iou_per_class
from ecmnet.msau import MSAU, MSAUConfig
from ecmnet.train import segmentation_loss

logger = logging.getLogger(__name__)

SCAN_TOLERANCE = 1e-10
GRADIENT_TOLERANCE = 1e-4
FAULTS = ("cross_scan",)

_cross_scan = ffm.cross_scan


def _corrupted_cross_scan(x):
    """Column-major route replaced by a second row-major copy"""
    xs = _cross_scan(x).clone()
    xs[:, 1] = xs[:, 0]
    return xs


def _timed(name, check):
    start = time.perf_counter()
    try:
        success, message = check()
    except Exception as e:
        success, message = False, f"{type(e).__name__}: {e}"
    seconds = time.perf_counter() - start
    level = logging.INFO if success else logging.ERROR
    logger.log(level, f"[{name}] {'ok' if success else 'FAILED'} in {seconds:.2f}s: {message}")
    return {"suite": name, "success": success, "message": message, "seconds": seconds}


def check_selective_scan(instances=200, max_length=32, max_state=8, seed=0):
    """Linear-time scan against the quadratic oracle on random 64-bit instances"""
    rng = np.random.default_rng(seed)
    gen = torch.Generator().manual_seed(seed)
    worst = 0.0
    for _ in range(instances):
        length = int(rng.integers(1, max_length + 1))
        state = int(rng.integers(1, max_state + 1))
        channels = int(rng.integers(1, 5))
        kw = dict(dtype=torch.float64, generator=gen)
        u = torch.randn(1, channels, length, **kw)
        delta = torch.randn(1, channels, length, **kw)
        A = -torch.rand(channels, state, **kw) * 2
        B = torch.randn(1, state, length, **kw)
        C = torch.randn(1, state, length, **kw)
        D = torch.randn(channels, **kw)
        bias = torch.randn(channels, **kw) * 0.1
        fast = ffm.selective_scan(u, delta, A, B, C, D, bias)
        slow = oracles.selective_scan_quadratic(u, delta, A, B, C, D, bias)
        worst = max(worst, float((fast - slow).abs().max()))
    if worst > SCAN_TOLERANCE:
        return False, f"selective_scan deviates from the quadratic oracle by {worst:.3e}"
    return True, f"{instances} instances, max deviation {worst:.1e}"


def check_cross_scan(max_side=8, seed=0):
    """cross_scan routes equal explicit index lists and merge(scan(x)) == 4x exactly"""
    gen = torch.Generator().manual_seed(seed)
    for height in range(1, max_side + 1):
        for width in range(1, max_side + 1):
            x = torch.randn(1, 2, height, width, dtype=torch.float64, generator=gen)
            xs = ffm.cross_scan(x)
            flat = x.flatten(2)
            for k, order in enumerate(oracles.scan_orders(height, width)):
                if not torch.equal(xs[:, k], flat[:, :, order]):
                    return False, f"cross_scan route {k} is not a pure reordering on a {height}x{width} grid"
            if not torch.equal(ffm.cross_merge(xs, height, width), 4 * x):
                return False, f"cross_merge(cross_scan(x)) != 4x on a {height}x{width} grid"
    return True, f"grids up to {max_side}x{max_side}"


def check_channel_shuffle(seed=0):
    """Shuffle equals the closed-form index map and inverts with C/g groups"""
    gen = torch.Generator().manual_seed(seed)
    for channels, groups in [(4, 2), (6, 2), (6, 3), (12, 4), (16, 2), (8, 1)]:
        x = torch.randn(2, channels, 3, 3, generator=gen)
        shuffled = channel_shuffle(x, groups)
        if not torch.equal(shuffled, oracles.shuffle_by_index(x, groups)):
            return False, f"channel_shuffle(C={channels}, g={groups}) differs from the index map"
        if not torch.equal(channel_shuffle(shuffled, channels // groups), x):
            return False, f"channel_shuffle(C={channels}, g={groups}) is not inverted by g'=C/g"
    return True, "6 channel/group pairs"


def check_metrics(trials=1000, side=8, seed=0):
    """iou_per_class against set arithmetic; streaming equals one-shot accumulation"""
    rng = np.random.default_rng(seed)
    for trial in range(trials):
        k = int(rng.integers(2, 6))
        pred = rng.integers(0, k, size=(side, side))
        gt = rng.integers(0, k, size=(side, side))
        gt[rng.random((side, side)) < 0.1] = 255
        got = iou_per_class(ConfusionMatrix(k).accumulate(pred, gt))
        expected = oracles.iou_set_oracle(pred, gt, k)
        for value, ref in zip(got, expected):
            if (ref is None) != bool(np.isnan(value)) or (ref is not None and value != ref):
                return False, f"iou_per_class differs from the set oracle in trial {trial}"

        streamed = ConfusionMatrix(k)
        for row_pred, row_gt in zip(pred, gt):
            streamed.accumulate(row_pred, row_gt)
        if streamed != ConfusionMatrix(k).accumulate(pred, gt):
            return False, f"streaming accumulation differs from one-shot in trial {trial}"
    return True, f"{trials} random {side}x{side} label maps"


def check_block_oracles(seed=0):
    """Module outputs against the straight-line oracles, eval mode, 64-bit"""
    torch.manual_seed(seed)
    x = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    edab = EDAB(EDABConfig(channels=4, dilation_rate=2)).double().eval()
    msau = MSAU(MSAUConfig(channels=4)).double().eval()
    fusion = ffm.FFM(ffm.FFMConfig(fused_channels=8, out_channels=4, model_dim=4, state_dim=2)).double().eval()
    skip = torch.randn(1, 4, 8, 8, dtype=torch.float64)
    with torch.no_grad():
        pairs = {
            "EDAB": (edab(x), oracles.edab_oracle(edab, x)),
            "MSAU": (msau(x), oracles.msau_oracle(msau, x)["y"]),
            "FFM": (fusion(x, skip), oracles.ffm_oracle(fusion, x, skip)),
        }
    for name, (got, expected) in pairs.items():
        deviation = float((got - expected).abs().max())
        if deviation > SCAN_TOLERANCE:
            return False, f"{name} deviates from its oracle by {deviation:.3e}"
    return True, "EDAB, MSAU and FFM match"


def check_gradients(directions=20, seed=0):
    """Directional finite differences vs autograd for each block and the loss"""
    torch.manual_seed(seed)
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    fusion = ffm.FFM(ffm.FFMConfig(fused_channels=6, out_channels=4, model_dim=4, state_dim=2))
    cases = {
        "EDAB": (EDAB(EDABConfig(channels=4, dilation_rate=2)), (x,)),
        "MSAU": (MSAU(MSAUConfig(channels=4)), (x,)),
        "SS2D": (ffm.SS2D(4, state_dim=2), (x[:, :, :3, :3],)),
        "FFM": (fusion, (x[:, :, :4, :4], torch.randn(1, 2, 4, 4, dtype=torch.float64))),
    }
    errors = {}
    for name, (module, inputs) in cases.items():
        errors[name] = oracles.module_gradcheck(module, inputs, directions, seed=seed)

    logits = torch.randn(2, 3, 4, 4, dtype=torch.float64, requires_grad=True)
    labels = torch.randint(0, 3, (2, 4, 4))
    labels[0, 0, 0] = 255
    errors["loss"] = oracles.directional_gradcheck(
        lambda: segmentation_loss(logits, labels)[0], [logits], directions, seed=seed
    )

    failed = {name: err for name, err in errors.items() if err >= GRADIENT_TOLERANCE}
    summary = ", ".join(f"{name} {err:.1e}" for name, err in errors.items())
    if failed:
        return False, f"relative error above {GRADIENT_TOLERANCE:g} for {sorted(failed)}: {summary}"
    return True, summary


SUITES = {
    "selective_scan": check_selective_scan,
    "cross_scan": check_cross_scan,
    "channel_shuffle": check_channel_shuffle,
    "metrics": check_metrics,
    "block_oracles": check_block_oracles,
    "gradients": check_gradients,
}


def run_selfcheck(suites=None, inject_fault=None):
    """
    Run the named suites (all by default).

    Args:
        suites: iterable of names from SUITES
        inject_fault: "cross_scan" swaps in a corrupted scan to exercise failure reporting

    Returns:
        List of per-suite result dicts
    """
    names = list(SUITES) if suites is None else list(suites)
    unknown = [name for name in names if name not in SUITES]
    if unknown:
        raise ValueError(f"Unknown selfcheck suites {unknown}, expected names from {list(SUITES)}")
    if inject_fault is not None and inject_fault not in FAULTS:
        raise ValueError(f"Unknown fault '{inject_fault}', expected one of {FAULTS}")

    patch = mock.patch.object(ffm, "cross_scan", _corrupted_cross_scan) if inject_fault else nullcontext()
    with patch:
        return [_timed(name, SUITES[name]) for name in names]
