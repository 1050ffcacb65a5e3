# ecmnet/train.py
"""Loss, poly-schedule optimisation loop, checkpoints and the ablation driver."""
import logging
import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
import pandas as pd
import plotly.graph_objects as go
import torch
import torch.nn.functional as F
from torch.utils.data import DataLoader

from ecmnet.analysis import count_flops, count_params
from ecmnet.data import IGNORE_INDEX, class_weights
from ecmnet.errors import CheckpointError, ConfigError, TrainingDivergedError
from ecmnet.metrics import ConfusionMatrix, mean_iou
from ecmnet.model import VARIANTS, build_model, config_hash, make_variant, shape_manifest

logger = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "sgd")
LAST_CHECKPOINT = "last.pt"
BEST_CHECKPOINT = "best.pt"
HISTORY_FILE = "history.jsonl"


@dataclass(frozen=True)
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    weight_decay: float = 1e-4
    poly_power: float = 0.9
    max_iterations: int = 2000
    batch_size: int = 8
    seed: int = 0
    class_weighting: bool = False
    checkpoint_every: int = 100
    eval_every: int = 200
    device: str = "cpu"
    ablation_seeds: tuple = (0, 1, 2)

    def validate(self):
        if self.optimizer not in OPTIMIZERS:
            raise ConfigError(f"Unknown optimizer '{self.optimizer}', expected one of {OPTIMIZERS}")
        if not self.lr > 0:
            raise ConfigError(f"lr must be positive, got {self.lr}")
        if self.max_iterations < 1:
            raise ConfigError(f"max_iterations must be >= 1, got {self.max_iterations}")
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1, got {self.batch_size}")
        return self

    @classmethod
    def from_dict(cls, data):
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ConfigError(f"Unknown train config keys: {sorted(unknown)}")
        data = dict(data)
        if "ablation_seeds" in data:
            data["ablation_seeds"] = tuple(data["ablation_seeds"])
        return cls(**data).validate()

    def to_dict(self):
        return asdict(self)


@dataclass
class Checkpoint:
    weights: dict
    shape_manifest: dict
    optimizer: dict
    iteration: int
    config_hash: str
    metrics: dict = field(default_factory=dict)
    history: list = field(default_factory=list)


@dataclass
class TrainResult:
    model: torch.nn.Module
    history: pd.DataFrame
    best_miou: float
    best_checkpoint: str = None
    last_checkpoint: str = None


def segmentation_loss(logits, labels, weight=None, ignore_index=IGNORE_INDEX):
    """
    Mean cross-entropy over non-ignored pixels.

    Returns:
        (loss, all_ignored); a batch with every pixel ignored gives a zero loss
        that still belongs to the graph
    """
    if logits.shape[0] != labels.shape[0] or logits.shape[2:] != labels.shape[1:]:
        raise ConfigError(f"Logits {tuple(logits.shape)} do not match labels {tuple(labels.shape)}")
    if not (labels != ignore_index).any():
        logger.warning("Every pixel in the batch is ignored; loss set to 0")
        return logits.sum() * 0.0, True
    loss = F.cross_entropy(logits, labels, weight=weight, ignore_index=ignore_index)
    return loss, False


def poly_lr(base_lr, iteration, max_iterations, power=0.9):
    return base_lr * (1.0 - iteration / max_iterations) ** power


def make_optimizer(model, cfg):
    if cfg.optimizer == "adamw":
        return torch.optim.AdamW(model.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    return torch.optim.SGD(model.parameters(), lr=cfg.lr, momentum=0.9, weight_decay=cfg.weight_decay)


def save_checkpoint(path, model, optimizer, iteration, cfg_hash, metrics=None, history=None):
    """Weights, shape manifest, optimizer state, iteration, config hash and metrics in one file"""
    os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
    payload = {
        "weights": model.state_dict(),
        "shape_manifest": shape_manifest(model),
        "optimizer": optimizer.state_dict() if optimizer is not None else {},
        "iteration": int(iteration),
        "config_hash": cfg_hash,
        "metrics": dict(metrics or {}),
        "history": list(history or []),
    }
    torch.save(payload, path)
    logger.info(f"Checkpoint at iteration {iteration} written to {path}")
    return path


def load_checkpoint(path, model=None, optimizer=None, expected_hash=None):
    """Load a checkpoint and optionally restore it into a model and optimizer"""
    if not path or not os.path.exists(path):
        raise CheckpointError(f"Checkpoint not found: {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except Exception as e:
        raise CheckpointError(f"Could not read checkpoint {path}: {e}") from e
    checkpoint = Checkpoint(**payload)
    if expected_hash is not None and checkpoint.config_hash != expected_hash:
        raise CheckpointError(
            f"Checkpoint {path} was written for config {checkpoint.config_hash[:12]}, "
            f"active config is {expected_hash[:12]}"
        )
    if model is not None:
        current = shape_manifest(model)
        mismatched = [k for k, shape in checkpoint.shape_manifest.items() if current.get(k) != shape]
        if mismatched or set(current) != set(checkpoint.shape_manifest):
            raise CheckpointError(f"Checkpoint {path} does not fit the model: {mismatched[:5] or 'key sets differ'}")
        model.load_state_dict(checkpoint.weights)
    if optimizer is not None and checkpoint.optimizer:
        optimizer.load_state_dict(checkpoint.optimizer)
    return checkpoint


def evaluate(model, dataset, num_classes, batch_size=4, device="cpu"):
    """Confusion matrix of argmax predictions over a whole split"""
    cm = ConfusionMatrix(num_classes)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        for images, labels in DataLoader(dataset, batch_size=batch_size, shuffle=False):
            logits = model(images.to(device))
            cm.accumulate(logits.argmax(dim=1).cpu(), labels)
    model.train(was_training)
    return cm


def _batch_indices(seed, iteration, dataset_size, batch_size):
    rng = np.random.default_rng([seed, iteration])
    return rng.choice(dataset_size, size=batch_size, replace=dataset_size < batch_size)


def _collate(dataset, indices, device):
    images, labels = zip(*(dataset[int(i)] for i in indices))
    return torch.stack(images).to(device), torch.stack(labels).to(device)


def _write_history(out_dir, history):
    path = os.path.join(out_dir, HISTORY_FILE)
    pd.DataFrame(history).to_json(path, orient="records", lines=True)
    return path


def train_loop(model, train_set, cfg, val_set=None, num_classes=None, out_dir=None,
               cfg_hash="", resume=None):
    """
    Optimise model on train_set for cfg.max_iterations steps.

    Batches are drawn from an rng seeded by (seed, iteration) and the learning
    rate is a pure function of the iteration, so a resumed run replays the
    uninterrupted one exactly.

    Args:
        model: network to train in place
        train_set: dataset yielding (image, label) tensors
        cfg: TrainConfig
        val_set: optional dataset for periodic mIoU
        num_classes: K for evaluation and class weights
        out_dir: where checkpoints and history.jsonl go (None = keep in memory)
        cfg_hash: config hash stored in and checked against checkpoints
        resume: checkpoint path to continue from

    Returns:
        TrainResult
    """
    cfg.validate()
    device = torch.device(cfg.device)
    model.to(device)
    optimizer = make_optimizer(model, cfg)
    num_classes = num_classes or getattr(getattr(model, "cfg", None), "num_classes", None)

    weight = None
    if cfg.class_weighting:
        sample_labels = [train_set[i][1].numpy() for i in range(min(len(train_set), 200))]
        weight = torch.from_numpy(class_weights(sample_labels, num_classes)).to(device)
        logger.info(f"Class weights: {np.round(weight.cpu().numpy(), 3).tolist()}")

    start, history, best_miou = 0, [], float("-inf")
    if resume:
        checkpoint = load_checkpoint(resume, model, optimizer, expected_hash=cfg_hash)
        start, history = checkpoint.iteration, list(checkpoint.history)
        best_miou = checkpoint.metrics.get("best_miou", best_miou)
        logger.info(f"Resumed from {resume} at iteration {start}")

    best_path = os.path.join(out_dir, BEST_CHECKPOINT) if out_dir else None
    last_path = os.path.join(out_dir, LAST_CHECKPOINT) if out_dir else None
    grad_norm = float("nan")
    params = [p for p in model.parameters() if p.requires_grad]

    for iteration in range(start, cfg.max_iterations):
        lr = poly_lr(cfg.lr, iteration, cfg.max_iterations, cfg.poly_power)
        for group in optimizer.param_groups:
            group["lr"] = lr

        model.train()
        images, labels = _collate(train_set, _batch_indices(cfg.seed, iteration, len(train_set), cfg.batch_size),
                                  device)
        logits = model(images)
        loss, all_ignored = segmentation_loss(logits, labels, weight)
        if not torch.isfinite(loss):
            raise TrainingDivergedError(iteration, lr, grad_norm, float(loss))

        optimizer.zero_grad(set_to_none=True)
        loss.backward()
        grad_norm = float(torch.nn.utils.clip_grad_norm_(params, float("inf")))
        if not math.isfinite(grad_norm):
            raise TrainingDivergedError(iteration, lr, grad_norm, float(loss))
        optimizer.step()

        record = {"iteration": iteration + 1, "loss": float(loss), "lr": lr,
                  "grad_norm": grad_norm, "all_ignored": all_ignored}
        done = iteration + 1 == cfg.max_iterations
        if val_set is not None and ((iteration + 1) % cfg.eval_every == 0 or done):
            miou = mean_iou(evaluate(model, val_set, num_classes, device=device))
            record["val_miou"] = miou
            logger.info(f"iter {iteration + 1}/{cfg.max_iterations} loss={float(loss):.4f} val_mIoU={miou:.4f}")
            if miou > best_miou:
                best_miou = miou
                if out_dir:
                    save_checkpoint(best_path, model, optimizer, iteration + 1, cfg_hash,
                                    {"best_miou": best_miou}, history + [record])
        elif (iteration + 1) % 50 == 0:
            logger.info(f"iter {iteration + 1}/{cfg.max_iterations} loss={float(loss):.4f} lr={lr:.2e}")
        history.append(record)

        if out_dir and ((iteration + 1) % cfg.checkpoint_every == 0 or done):
            save_checkpoint(last_path, model, optimizer, iteration + 1, cfg_hash, {"best_miou": best_miou}, history)
            _write_history(out_dir, history)

    return TrainResult(
        model=model,
        history=pd.DataFrame(history),
        best_miou=best_miou if math.isfinite(best_miou) else float("nan"),
        best_checkpoint=best_path if best_path and os.path.exists(best_path) else None,
        last_checkpoint=last_path if last_path and os.path.exists(last_path) else None,
    )


class AblationReport:
    """One row per variant: enabled paths, params, FLOPs and mIoU per seed with the median"""

    def __init__(self, frame):
        self.frame = frame

    def to_csv(self):
        return self.frame.to_csv(index=False, float_format="%.4f")

    def write_chart(self, path):
        df = self.frame
        fig = go.Figure()
        fig.add_trace(go.Bar(x=df["variant"], y=df["miou_median"], name="median mIoU"))
        fig.add_trace(go.Scatter(x=df["variant"], y=df["params_k"], name="params (K)", yaxis="y2",
                                 mode="lines+markers"))
        fig.update_layout(
            title="Ablation",
            yaxis=dict(title="mIoU"),
            yaxis2=dict(title="params (K)", overlaying="y", side="right"),
        )
        os.makedirs(os.path.dirname(os.path.abspath(path)), exist_ok=True)
        fig.write_html(path)
        return path


def run_ablation_suite(variants, make_datasets, base_cfg, train_cfg, seeds=None, out_dir=None,
                       flops_input_size=None):
    """
    Train and evaluate every variant for every seed.

    Args:
        variants: names from the ablation lattice
        make_datasets: callable seed -> (train_set, val_set)
        base_cfg: ModelConfig supplying everything but the switches
        train_cfg: TrainConfig (its seed is replaced per run)
        seeds: seeds to run, default train_cfg.ablation_seeds
        out_dir: optional directory for per-run artifacts
        flops_input_size: (H, W) for the FLOP column, default base_cfg.input_size

    Returns:
        AblationReport
    """
    if not variants:
        raise ConfigError("Ablation suite needs at least one variant")
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise ConfigError(f"Unknown ablation variants {unknown}")
    seeds = tuple(seeds if seeds is not None else train_cfg.ablation_seeds)
    flops_input_size = tuple(flops_input_size or base_cfg.input_size)

    rows = []
    for name in variants:
        model_cfg = make_variant(name, base_cfg)
        torch.manual_seed(0)
        reference = build_model(model_cfg)
        params, _ = count_params(reference)
        flops, _ = count_flops(reference, flops_input_size)
        row = {
            "variant": name,
            "connections": "".join("x" if on else "-" for on in model_cfg.switches.connections),
            "msaus": "".join("x" if on else "-" for on in model_cfg.switches.msaus),
            "ffm": "x" if model_cfg.switches.ffm else "-",
            "params": params,
            "params_k": params / 1e3,
            "flops_g": flops / 1e9,
        }
        mious = []
        for seed in seeds:
            torch.manual_seed(seed)
            model = build_model(model_cfg)
            train_set, val_set = make_datasets(seed)
            run_cfg = TrainConfig.from_dict({**train_cfg.to_dict(), "seed": seed})
            run_dir = os.path.join(out_dir, f"{name}_seed{seed}") if out_dir else None
            result = train_loop(model, train_set, run_cfg, val_set=val_set,
                                num_classes=model_cfg.num_classes, out_dir=run_dir,
                                cfg_hash=config_hash(model_cfg))
            miou = mean_iou(evaluate(result.model, val_set, model_cfg.num_classes, device=run_cfg.device))
            row[f"miou_seed{seed}"] = miou
            mious.append(miou)
            logger.info(f"Ablation {name} seed {seed}: mIoU={miou:.4f}")
        row["miou_median"] = float(np.median(mious)) if mious else float("nan")
        rows.append(row)

    report = AblationReport(pd.DataFrame(rows))
    if out_dir:
        os.makedirs(out_dir, exist_ok=True)
        with open(os.path.join(out_dir, "ablation.csv"), "w") as f:
            f.write(report.to_csv())
        report.write_chart(os.path.join(out_dir, "ablation.html"))
    return report
