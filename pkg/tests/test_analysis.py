import os

import pytest
import toml
import torch
import torch.nn as nn
from fvcore.nn import FlopCountAnalysis

from ecmnet.analysis import analyze, benchmark_latency, count_conv2d, count_flops, count_linear, count_params
from ecmnet.model import ModelConfig, build_model, make_variant


def _conv_stack():
    return nn.Sequential(nn.Conv2d(3, 8, 3, padding=1), nn.ReLU(), nn.Conv2d(8, 8, 3, padding=1, bias=False))


class TestParams:
    def test_single_conv_with_bias(self):
        total, by_module = count_params(nn.Conv2d(16, 16, 3))
        assert total == 2320
        assert by_module["weight"] == 2304

    def test_empty_model(self):
        assert count_params(nn.Sequential())[0] == 0

    def test_frozen_parameters_excluded(self):
        model = _conv_stack()
        model[0].weight.requires_grad_(False)
        total, by_module = count_params(model)
        assert total == 8 + 8 * 8 * 9
        assert by_module["0"] == 8

    def test_matches_closed_form(self, tiny_variant):
        for name in ("Baseline", "B2", "C3"):
            cfg = tiny_variant(name)
            assert count_params(build_model(cfg))[0] == cfg.param_count()

    def test_default_model_budget(self):
        total, _ = count_params(build_model(ModelConfig()))
        assert 800_000 <= total <= 950_000


class TestFlops:
    def test_conv_closed_form(self):
        conv = nn.Conv2d(16, 16, 3, padding=1, bias=False)
        y = torch.zeros(1, 16, 32, 32)
        assert count_conv2d(conv, (torch.zeros(1, 16, 32, 32),), y, 2) == 4_718_592
        assert count_conv2d(conv, (torch.zeros(1, 16, 32, 32),), y, 1) == 2_359_296

    def test_pointwise_on_single_pixel(self):
        y = torch.zeros(1, 1, 1, 1)
        assert count_conv2d(nn.Conv2d(1, 1, 1, bias=False), (y,), y, 2) == 2
        assert count_conv2d(nn.Conv2d(1, 1, 1), (y,), y, 2) == 3

    def test_conv_macs_agree_with_fvcore_tracer(self):
        model = nn.Sequential(nn.Conv2d(3, 8, 3, padding=1, bias=False),
                              nn.Conv2d(8, 8, 3, padding=2, dilation=2, groups=4, bias=False),
                              nn.Conv2d(8, 4, 1, bias=False))
        macs, _ = count_flops(model, (16, 20), flops_per_mac=1)
        traced = FlopCountAnalysis(model, torch.zeros(1, 3, 16, 20)).unsupported_ops_warnings(False)
        assert macs == traced.total()

    def test_linear_macs_agree_with_fvcore_tracer(self):
        layer = nn.Linear(16, 8, bias=False)
        x = torch.zeros(2, 5, 16)
        assert count_linear(layer, (x,), layer(x), 1) == FlopCountAnalysis(layer, x).total()

    def test_conv_stack_is_linear_in_pixels(self):
        model = _conv_stack()
        small, _ = count_flops(model, (16, 16))
        large, _ = count_flops(model, (32, 32))
        assert large == 4 * small

    def test_network_scales_with_pixels(self):
        model = build_model(ModelConfig())
        small, _ = count_flops(model, (256, 256))
        large, _ = count_flops(model, (512, 512))
        assert 3.9 <= large / small <= 4.0

    def test_invalid_mac_convention(self):
        with pytest.raises(ValueError):
            count_flops(_conv_stack(), (8, 8), flops_per_mac=3)

    def test_ablation_lattice(self, tiny_variant):
        flops = {name: count_flops(build_model(tiny_variant(name)), (64, 64))[0]
                 for name in ("Baseline", "A3", "C3")}
        assert flops["Baseline"] < flops["A3"] < flops["C3"]

    def test_hooks_removed_and_mode_restored(self, tiny_config):
        model = build_model(tiny_config).train()
        count_flops(model, (32, 32))
        assert model.training
        assert all(not m._forward_hooks for m in model.modules())

    @pytest.mark.slow
    def test_default_model_at_full_resolution(self):
        flops, _ = count_flops(build_model(ModelConfig()), (1024, 1024))
        assert 7.0e9 <= flops <= 9.5e9


class TestReport:
    @pytest.fixture
    def budget(self, tiny_config):
        torch.manual_seed(0)
        return analyze(build_model(tiny_config), input_size=(64, 64), variant="C3")

    def test_frame_depth(self, budget):
        top = budget.to_frame(depth=1)
        assert list(top.columns) == ["module", "params", "flops"]
        totals = top.set_index("module").loc["(total)"]
        assert totals["params"] == budget.total_params
        assert totals["flops"] == budget.flops
        deeper = budget.to_frame(depth=2)
        assert len(deeper) > len(top)
        assert all(name.count(".") <= 1 for name in deeper["module"])

    def test_toml_document(self, budget):
        data = toml.loads(budget.to_toml())
        assert data["total_params"] == budget.total_params
        assert data["flops_per_mac"] == 2
        assert data["input_size"] == [64, 64]
        assert data["modules"]["total"]["flops"] == budget.flops

    def test_chart(self, budget, tmp_path):
        path = budget.write_chart(str(tmp_path / "charts" / "budget.html"))
        assert os.path.getsize(path) > 0

    def test_summary_mentions_convention(self, budget):
        text = budget.summary()
        assert "MAC = 2 FLOPs" in text
        assert "variant: C3" in text

    def test_params_only(self, tiny_config):
        budget = analyze(build_model(make_variant("Baseline", tiny_config)))
        assert budget.flops == 0 and budget.input_size is None


class TestLatency:
    def test_samples_and_hardware(self, tiny_config):
        stats = benchmark_latency(build_model(tiny_config), (32, 32), trials=5, warmup=1)
        assert len(stats.samples) == 5
        assert all(s > 0 for s in stats.samples)
        assert stats.spread >= 0
        assert "torch" in stats.hardware
        assert stats.to_dict()["input_size"] == [32, 32]

    def test_needs_three_trials(self, tiny_config):
        with pytest.raises(ValueError, match="at least 3"):
            benchmark_latency(build_model(tiny_config), (32, 32), trials=2)

    @pytest.mark.slow
    def test_larger_input_is_not_faster(self, tiny_config):
        model = build_model(tiny_config)
        for _ in range(3):
            small = benchmark_latency(model, (64, 64), trials=5).median
            large = benchmark_latency(model, (256, 256), trials=5).median
            if large >= small:
                break
        assert large >= small
