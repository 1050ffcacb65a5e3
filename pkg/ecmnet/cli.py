# ecmnet/cli.py
"""
Command line: train, eval, analyze, ablate, selfcheck and synth.

Settings come from the built-in defaults, then --config (or ECMNET_CONFIG),
then repeated --set section.key=value, then the dedicated flags. Every run
writes resolved_config.toml and manifest.json into its output directory.

Exit codes: 0 success, 1 check or metric failure, 2 usage or config error.
"""
import argparse
import json
import logging
import os
import re
import sys
from datetime import datetime, timezone

import pandas as pd
import torch

from ecmnet import __version__
from ecmnet.analysis import analyze
from ecmnet.data import AugmentPolicy, DatasetSpec, build_dataset, write_synthetic_dataset
from ecmnet.errors import (CheckpointError, ConfigError, DataError, MetricError, NumericalError,
                           TrainingDivergedError)
from ecmnet.metrics import report
from ecmnet.model import VARIANTS, ModelConfig, build_model, config_hash
from ecmnet.selfcheck import FAULTS, SUITES, run_selfcheck
from ecmnet.train import TrainConfig, evaluate, load_checkpoint, run_ablation_suite, train_loop
from ecmnet.utils.settings_manager import settings

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_USAGE = 2
RESOLVED_CONFIG = "resolved_config.toml"
MANIFEST = "manifest.json"
# Synthetic train and validation sets are drawn from these fixed generator seeds
SYNTH_TRAIN_SEED = 0
SYNTH_VAL_SEED = 1


def parse_size(text):
    """'1024x512' -> (1024, 512)"""
    match = re.fullmatch(r"\s*(\d+)\s*[xX]\s*(\d+)\s*", text)
    if not match:
        raise argparse.ArgumentTypeError(f"input size must look like HxW (e.g. 1024x1024), got '{text}'")
    return int(match.group(1)), int(match.group(2))


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file (defaults to $ECMNET_CONFIG)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override one config value; repeatable")
    common.add_argument("--out", help="output directory (default runs/<command>)")
    common.add_argument("--verbose", action="store_true", help="debug logging")

    parser = argparse.ArgumentParser(prog="ecmnet", description="ECMNet segmentation toolkit")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    train = sub.add_parser("train", parents=[common], help="train a model")
    train.add_argument("--variant", choices=list(VARIANTS))
    train.add_argument("--dataset", choices=["cityscapes", "camvid", "synthetic"])
    train.add_argument("--resume", help="checkpoint to continue from")

    ev = sub.add_parser("eval", parents=[common], help="per-class IoU of a checkpoint")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--variant", choices=list(VARIANTS))
    ev.add_argument("--dataset", choices=["cityscapes", "camvid", "synthetic"])

    an = sub.add_parser("analyze", parents=[common], help="parameter and FLOP itemisation")
    an.add_argument("--variant", choices=list(VARIANTS))
    an.add_argument("--input", type=parse_size, metavar="HxW")
    an.add_argument("--depth", type=int, help="module depth of the itemisation")
    an.add_argument("--latency", action="store_true", help="also time forward passes")

    ab = sub.add_parser("ablate", parents=[common], help="train the ablation lattice")
    ab.add_argument("--variants", nargs="+", choices=list(VARIANTS), default=list(VARIANTS))
    ab.add_argument("--seeds", nargs="+", type=int)

    sc = sub.add_parser("selfcheck", parents=[common], help="oracle and gradient suites")
    sc.add_argument("--suite", dest="suites", action="append", choices=list(SUITES))
    sc.add_argument("--inject-fault", choices=list(FAULTS), help=argparse.SUPPRESS)

    sy = sub.add_parser("synth", parents=[common], help="write the synthetic shapes dataset as PNG files")
    sy.add_argument("--splits", nargs="+", default=["train", "val"], choices=["train", "val", "test"])
    return parser


def _flag_overrides(args):
    overrides = []
    if getattr(args, "variant", None):
        overrides.append(f'model.variant="{args.variant}"')
    if getattr(args, "input", None):
        overrides.append(f"model.input_size=[{args.input[0]}, {args.input[1]}]")
    if getattr(args, "dataset", None):
        overrides.append(f'data.dataset="{args.dataset}"')
    if getattr(args, "depth", None) is not None:
        overrides.append(f"analysis.itemize_depth={args.depth}")
    return overrides


def resolve_settings(args):
    """Load, override and pin the data root so the snapshot alone reproduces the run"""
    settings.load(args.config)
    settings.apply_overrides(args.overrides)
    settings.apply_overrides(_flag_overrides(args))
    if not settings["data"]["root"] and settings.data_root:
        settings.apply_overrides([f"data.root={json.dumps(settings.data_root)}"])
    return settings


def model_config():
    return ModelConfig.from_settings(settings.model)


def make_datasets(model_cfg, seed):
    """(train, val) datasets for the configured source"""
    data = settings.data
    num_classes = model_cfg.num_classes
    if data["dataset"] == "synthetic" and data["synth_classes"] != num_classes:
        raise ConfigError(
            f"data.synth_classes={data['synth_classes']} but model.num_classes={num_classes}; set both"
        )
    policy = AugmentPolicy(
        flip_prob=data["flip_prob"],
        scale_range=tuple(data["scale_range"]),
        crop_size=tuple(data["crop_size"]) or None,
    ).validate()
    synth = {"size": tuple(data["synth_size"]), "priors": data["synth_priors"], "shapes": data["synth_shapes"]}
    spec = DatasetSpec(name=data["dataset"], root=data["root"], split=data["train_split"], num_classes=num_classes)
    train_set = build_dataset(spec, policy, seed,
                              {**synth, "samples": data["synth_train_samples"], "seed": SYNTH_TRAIN_SEED})
    val_set = build_dataset(spec.with_split(data["val_split"]), None, seed,
                            {**synth, "samples": data["synth_val_samples"], "seed": SYNTH_VAL_SEED})
    return train_set, val_set


def class_names(model_cfg):
    return DatasetSpec(name=settings.data["dataset"], num_classes=model_cfg.num_classes).class_names


def _write_report(metric_report, out_dir):
    path = os.path.join(out_dir, "metrics.csv")
    with open(path, "w") as f:
        f.write(metric_report.to_csv())
    print(metric_report.to_frame().to_string(index=False, na_rep="undefined"))
    return path


def cmd_train(args, out_dir):
    model_cfg = model_config()
    train_cfg = TrainConfig.from_dict(settings.train)
    train_set, val_set = make_datasets(model_cfg, train_cfg.seed)
    torch.manual_seed(train_cfg.seed)
    model = build_model(model_cfg)
    result = train_loop(model, train_set, train_cfg, val_set=val_set, num_classes=model_cfg.num_classes,
                        out_dir=out_dir, cfg_hash=config_hash(model_cfg), resume=args.resume)
    cm = evaluate(result.model, val_set, model_cfg.num_classes, device=train_cfg.device)
    metrics_path = _write_report(report(cm, list(class_names(model_cfg))), out_dir)
    artifacts = [p for p in (result.last_checkpoint, result.best_checkpoint) if p]
    return EXIT_OK, artifacts + [os.path.join(out_dir, "history.jsonl"), metrics_path]


def cmd_eval(args, out_dir):
    model_cfg = model_config()
    if not os.path.exists(args.checkpoint):
        raise CheckpointError(f"Checkpoint not found: {args.checkpoint}")
    model = build_model(model_cfg)
    load_checkpoint(args.checkpoint, model, expected_hash=config_hash(model_cfg))
    _, val_set = make_datasets(model_cfg, settings.train["seed"])
    cm = evaluate(model, val_set, model_cfg.num_classes, device=settings.train["device"])
    return EXIT_OK, [_write_report(report(cm, list(class_names(model_cfg))), out_dir)]


def cmd_analyze(args, out_dir):
    model_cfg = model_config()
    options = settings.analysis
    depth = options["itemize_depth"]
    torch.manual_seed(0)
    model = build_model(model_cfg)
    budget = analyze(
        model, input_size=model_cfg.input_size, flops_per_mac=options["flops_per_mac"],
        latency_trials=options["latency_trials"] if args.latency else 0,
        latency_warmup=options["latency_warmup"], variant=model_cfg.variant,
    )
    print(budget.summary())
    frame = budget.to_frame(depth)
    print(frame.to_string(index=False))

    toml_path = os.path.join(out_dir, "budget.toml")
    with open(toml_path, "w") as f:
        f.write(budget.to_toml(depth))
    csv_path = os.path.join(out_dir, "budget.csv")
    frame.to_csv(csv_path, index=False)
    chart_path = budget.write_chart(os.path.join(out_dir, "budget.html"), depth)
    return EXIT_OK, [toml_path, csv_path, chart_path]


def cmd_ablate(args, out_dir):
    base = model_config()
    train_cfg = TrainConfig.from_dict(settings.train)
    datasets = make_datasets(base, train_cfg.seed)
    ablation = run_ablation_suite(args.variants, lambda seed: datasets, base, train_cfg,
                                  seeds=args.seeds, out_dir=out_dir)
    print(ablation.frame.to_string(index=False))
    return EXIT_OK, [os.path.join(out_dir, "ablation.csv"), os.path.join(out_dir, "ablation.html")]


def cmd_selfcheck(args, out_dir):
    results = run_selfcheck(args.suites, inject_fault=args.inject_fault)
    frame = pd.DataFrame(results, columns=["suite", "success", "seconds", "message"])
    print(frame.to_string(index=False, formatters={"seconds": "{:.2f}".format}))
    path = os.path.join(out_dir, "selfcheck.json")
    with open(path, "w") as f:
        json.dump(results, f, indent=2)
    failed = [r["suite"] for r in results if not r["success"]]
    if failed:
        for r in results:
            if not r["success"]:
                print(f"FAILED {r['suite']}: {r['message']}", file=sys.stderr)
    return (EXIT_FAILURE if failed else EXIT_OK), [path]


def cmd_synth(args, out_dir):
    data = settings.data
    height, width = data["synth_size"]
    counts = {"train": data["synth_train_samples"], "val": data["synth_val_samples"],
              "test": data["synth_val_samples"]}
    seeds = {"train": SYNTH_TRAIN_SEED, "val": SYNTH_VAL_SEED, "test": SYNTH_VAL_SEED + 1}
    artifacts = []
    for split in args.splits:
        write_synthetic_dataset(out_dir, split, counts[split], height, width, data["synth_classes"],
                                seed=seeds[split], priors=data["synth_priors"] or None,
                                shapes=data["synth_shapes"])
        artifacts += [os.path.join(out_dir, split), os.path.join(out_dir, f"{split}_labels")]
    return EXIT_OK, artifacts


COMMANDS = {
    "train": cmd_train,
    "eval": cmd_eval,
    "analyze": cmd_analyze,
    "ablate": cmd_ablate,
    "selfcheck": cmd_selfcheck,
    "synth": cmd_synth,
}


def write_manifest(out_dir, args, exit_code, artifacts):
    manifest = {
        "command": args.command,
        "version": __version__,
        "created": datetime.now(timezone.utc).isoformat(),
        "exit_code": exit_code,
        "config": RESOLVED_CONFIG,
        "artifacts": sorted(os.path.relpath(p, out_dir) for p in artifacts if p and os.path.exists(p)),
    }
    path = os.path.join(out_dir, MANIFEST)
    with open(path, "w") as f:
        json.dump(manifest, f, indent=2)
    return path


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return e.code

    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(asctime)s %(levelname)s %(name)s: %(message)s",
    )
    out_dir = args.out or os.path.join("runs", args.command)
    os.makedirs(out_dir, exist_ok=True)

    artifacts = []
    try:
        resolve_settings(args)
        settings.snapshot(os.path.join(out_dir, RESOLVED_CONFIG))
        exit_code, artifacts = COMMANDS[args.command](args, out_dir)
    except (ConfigError, CheckpointError, DataError) as e:
        logger.error(str(e))
        exit_code = EXIT_USAGE
    except (MetricError, NumericalError, TrainingDivergedError) as e:
        logger.error(str(e))
        exit_code = EXIT_FAILURE

    write_manifest(out_dir, args, exit_code, artifacts + [os.path.join(out_dir, RESOLVED_CONFIG)])
    return exit_code


if __name__ == "__main__":
    raise SystemExit(main())
