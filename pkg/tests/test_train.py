import math
import os
import shutil

import numpy as np
import pandas as pd
import pytest
import torch

import ecmnet.train as train_module
from ecmnet.analysis import count_params
from ecmnet.data import SyntheticDataset
from ecmnet.errors import CheckpointError, ConfigError, TrainingDivergedError
from ecmnet.metrics import mean_iou
from ecmnet.model import ModelConfig, build_model, config_hash, make_variant
from ecmnet.oracles import cross_entropy_oracle, directional_gradcheck
from ecmnet.train import (TrainConfig, evaluate, load_checkpoint, poly_lr, run_ablation_suite,
                          save_checkpoint, segmentation_loss, train_loop)


@pytest.fixture
def shapes():
    return SyntheticDataset(16, 32, 32, 3, seed=0)


def _fast_cfg(**kwargs):
    defaults = dict(max_iterations=4, batch_size=2, lr=2e-3, checkpoint_every=2, eval_every=2)
    return TrainConfig(**{**defaults, **kwargs})


class TestLoss:
    @pytest.mark.parametrize("k", [2, 3, 11, 19])
    def test_uniform_logits(self, k):
        logits = torch.zeros(2, k, 4, 4)
        labels = torch.randint(0, k, (2, 4, 4))
        loss, all_ignored = segmentation_loss(logits, labels)
        assert loss.item() == pytest.approx(math.log(k), rel=1e-6)
        assert not all_ignored

    def test_saturated_logits(self):
        labels = torch.randint(0, 5, (1, 6, 6))
        logits = torch.nn.functional.one_hot(labels, 5).permute(0, 3, 1, 2).float() * 100
        assert segmentation_loss(logits, labels)[0].item() < 1e-3

    def test_matches_per_pixel_oracle(self, rng):
        logits = torch.from_numpy(rng.normal(size=(2, 4, 3, 3)))
        labels = torch.from_numpy(rng.integers(0, 4, (2, 3, 3)))
        labels[0, 0, :] = 255
        weight = torch.tensor([1.0, 0.5, 2.0, 1.5], dtype=torch.float64)
        loss, _ = segmentation_loss(logits, labels, weight)
        torch.testing.assert_close(loss, cross_entropy_oracle(logits, labels, weight), rtol=1e-10, atol=1e-10)

    def test_all_ignored(self, caplog):
        logits = torch.randn(1, 3, 4, 4, requires_grad=True)
        loss, all_ignored = segmentation_loss(logits, torch.full((1, 4, 4), 255))
        assert all_ignored
        assert loss.item() == 0.0
        loss.backward()
        assert torch.equal(logits.grad, torch.zeros_like(logits))
        assert "ignored" in caplog.text

    def test_shape_mismatch(self):
        with pytest.raises(ConfigError):
            segmentation_loss(torch.zeros(1, 3, 4, 4), torch.zeros(1, 4, 5, dtype=torch.long))

    def test_gradient(self, rng):
        logits = torch.from_numpy(rng.normal(size=(1, 3, 4, 4))).requires_grad_(True)
        labels = torch.from_numpy(rng.integers(0, 3, (1, 4, 4)))
        err = directional_gradcheck(lambda: segmentation_loss(logits, labels)[0], [logits])
        assert err < 1e-4


class TestSchedule:
    def test_poly_lr(self):
        assert poly_lr(0.01, 0, 100) == 0.01
        assert poly_lr(0.01, 50, 100) == pytest.approx(0.01 * 0.5 ** 0.9)
        assert poly_lr(0.01, 100, 100) == 0.0

    def test_lr_recorded_per_iteration(self, tiny_config, shapes, seeded):
        result = train_loop(build_model(tiny_config), shapes, _fast_cfg(), num_classes=3)
        expected = [poly_lr(2e-3, i, 4) for i in range(4)]
        assert result.history["lr"].tolist() == pytest.approx(expected)

    @pytest.mark.parametrize("kwargs", [{"optimizer": "adam"}, {"lr": 0.0}, {"max_iterations": 0},
                                        {"batch_size": 0}])
    def test_invalid_config(self, kwargs):
        with pytest.raises(ConfigError):
            TrainConfig(**kwargs).validate()

    def test_from_dict_rejects_unknown_keys(self):
        with pytest.raises(ConfigError, match="epochs"):
            TrainConfig.from_dict({"epochs": 3})


class TestTrainLoop:
    def test_one_iteration_changes_weights(self, tiny_config, shapes, seeded):
        model = build_model(tiny_config)
        before = {k: v.clone() for k, v in model.state_dict().items()}
        result = train_loop(model, shapes, _fast_cfg(max_iterations=1), num_classes=3)
        assert len(result.history) == 1
        changed = [k for k, v in model.state_dict().items() if not torch.equal(v, before[k])]
        assert changed

    def test_artifacts(self, tiny_config, shapes, seeded, tmp_path):
        val = SyntheticDataset(4, 32, 32, 3, seed=1)
        out = str(tmp_path / "run")
        result = train_loop(build_model(tiny_config), shapes, _fast_cfg(), val_set=val, num_classes=3,
                            out_dir=out, cfg_hash=config_hash(tiny_config))
        assert result.last_checkpoint == os.path.join(out, "last.pt")
        assert result.best_checkpoint == os.path.join(out, "best.pt")
        assert 0.0 <= result.best_miou <= 1.0
        history = pd.read_json(os.path.join(out, "history.jsonl"), lines=True)
        assert history["iteration"].tolist() == [1, 2, 3, 4]
        assert history["val_miou"].notna().sum() == 2

    def test_resume_replays_uninterrupted_run(self, tiny_config, shapes, tmp_path, monkeypatch):
        cfg = _fast_cfg(max_iterations=20, checkpoint_every=10)
        cfg_hash = config_hash(tiny_config)
        mid = str(tmp_path / "mid.pt")
        save = train_module.save_checkpoint

        def keep_midpoint(path, model, optimizer, iteration, *args, **kwargs):
            written = save(path, model, optimizer, iteration, *args, **kwargs)
            if iteration == 10:
                shutil.copy(written, mid)
            return written

        monkeypatch.setattr(train_module, "save_checkpoint", keep_midpoint)
        torch.manual_seed(0)
        full = train_loop(build_model(tiny_config), shapes, cfg, num_classes=3,
                          out_dir=str(tmp_path / "full"), cfg_hash=cfg_hash)

        torch.manual_seed(99)
        resumed = train_loop(build_model(tiny_config), shapes, cfg, num_classes=3,
                             out_dir=str(tmp_path / "resumed"), cfg_hash=cfg_hash, resume=mid)

        assert resumed.history["loss"].tolist() == full.history["loss"].tolist()
        expected = full.model.state_dict()
        for key, value in resumed.model.state_dict().items():
            assert torch.equal(value, expected[key]), key

    def test_divergence(self, tiny_variant, shapes):
        model = build_model(tiny_variant("Baseline"))
        with torch.no_grad():
            next(model.parameters()).fill_(float("nan"))
        with pytest.raises(TrainingDivergedError) as info:
            train_loop(model, shapes, _fast_cfg(), num_classes=3)
        assert info.value.iteration == 0
        assert info.value.lr == pytest.approx(2e-3)

    def test_class_weighting(self, tiny_config, shapes, seeded, caplog):
        caplog.set_level("INFO")
        train_loop(build_model(tiny_config), shapes, _fast_cfg(max_iterations=1, class_weighting=True),
                   num_classes=3)
        assert "Class weights" in caplog.text

    def test_evaluate_random_model_is_poor(self, tiny_config, seeded):
        cm = evaluate(build_model(tiny_config), SyntheticDataset(4, 32, 32, 3, seed=1), 3)
        assert cm.total == 4 * 32 * 32
        assert mean_iou(cm) < 0.5


class TestCheckpoint:
    @pytest.fixture
    def saved(self, tiny_config, tmp_path, seeded):
        model = build_model(tiny_config)
        path = save_checkpoint(str(tmp_path / "ckpt" / "last.pt"), model, None, 7, config_hash(tiny_config),
                               {"best_miou": 0.5})
        return path, model

    def test_round_trip(self, saved, tiny_config):
        path, model = saved
        torch.manual_seed(1)
        other = build_model(tiny_config)
        checkpoint = load_checkpoint(path, other, expected_hash=config_hash(tiny_config))
        assert checkpoint.iteration == 7
        assert checkpoint.metrics == {"best_miou": 0.5}
        for key, value in model.state_dict().items():
            assert torch.equal(other.state_dict()[key], value)

    def test_missing(self, tmp_path):
        with pytest.raises(CheckpointError, match="not found"):
            load_checkpoint(str(tmp_path / "absent.pt"))

    def test_hash_mismatch(self, saved):
        with pytest.raises(CheckpointError, match="active config"):
            load_checkpoint(saved[0], expected_hash="0" * 64)

    def test_shape_mismatch(self, saved, tiny_variant):
        with pytest.raises(CheckpointError, match="does not fit"):
            load_checkpoint(saved[0], build_model(tiny_variant("Baseline")))

    def test_unreadable(self, tmp_path):
        path = tmp_path / "broken.pt"
        path.write_bytes(b"not a checkpoint")
        with pytest.raises(CheckpointError, match="Could not read"):
            load_checkpoint(str(path))


class TestAblation:
    def test_two_variant_suite(self, tiny_config, tmp_path):
        datasets = (SyntheticDataset(8, 32, 32, 3, seed=0), SyntheticDataset(4, 32, 32, 3, seed=1))
        report = run_ablation_suite(["Baseline", "C3"], lambda seed: datasets, tiny_config,
                                    _fast_cfg(max_iterations=2), seeds=[0], out_dir=str(tmp_path))
        df = report.frame
        assert df["variant"].tolist() == ["Baseline", "C3"]
        assert df.loc[0, "connections"] == "---" and df.loc[1, "connections"] == "xxx"
        for name, params in zip(df["variant"], df["params"]):
            assert params == count_params(build_model(make_variant(name, tiny_config)))[0]
        assert df.loc[0, "flops_g"] < df.loc[1, "flops_g"]
        assert df["miou_seed0"].between(0.0, 1.0).all()
        assert os.path.exists(tmp_path / "ablation.csv")
        assert os.path.exists(tmp_path / "ablation.html")
        assert os.path.exists(tmp_path / "C3_seed0" / "last.pt")

    def test_unknown_variant(self, tiny_config):
        with pytest.raises(ConfigError, match="Unknown ablation variants"):
            run_ablation_suite(["C4"], None, tiny_config, _fast_cfg())


def _synthetic_run(variant, seed):
    cfg = make_variant(variant, ModelConfig(num_classes=3, input_size=(64, 64)))
    train_set = SyntheticDataset(512, 64, 64, 3, seed=0)
    val_set = SyntheticDataset(64, 64, 64, 3, seed=1)
    torch.manual_seed(seed)
    result = train_loop(build_model(cfg), train_set,
                        TrainConfig(lr=2e-3, max_iterations=2000, batch_size=8, seed=seed, eval_every=500),
                        val_set=val_set, num_classes=3)
    return mean_iou(evaluate(result.model, val_set, 3))


@pytest.mark.slow
def test_synthetic_shapes_are_learned():
    assert _synthetic_run("C3", 0) >= 0.90


@pytest.mark.slow
def test_full_model_not_worse_than_baseline():
    c3 = np.median([_synthetic_run("C3", seed) for seed in range(3)])
    baseline = np.median([_synthetic_run("Baseline", seed) for seed in range(3)])
    assert c3 >= baseline
