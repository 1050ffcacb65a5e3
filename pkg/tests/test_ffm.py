import math
import time

import pytest
import torch

from ecmnet.errors import ConfigError, NumericalError
from ecmnet.ffm import FFM, SS2D, FFMConfig, cross_merge, cross_scan, selective_scan
from ecmnet.oracles import ffm_oracle, module_gradcheck, scan_orders, selective_scan_quadratic, ss2d_oracle

F64 = torch.float64


def _scan_inputs(gen, channels=3, length=16, state=4, groups=None):
    shape_bc = (1, state, length) if groups is None else (1, groups, state, length)
    return dict(
        u=torch.randn(1, channels, length, dtype=F64, generator=gen),
        delta=torch.randn(1, channels, length, dtype=F64, generator=gen),
        A=-torch.rand(channels, state, dtype=F64, generator=gen) * 2,
        B=torch.randn(*shape_bc, dtype=F64, generator=gen),
        C=torch.randn(*shape_bc, dtype=F64, generator=gen),
        D=torch.randn(channels, dtype=F64, generator=gen),
        delta_bias=torch.randn(channels, dtype=F64, generator=gen) * 0.1,
    )


class TestCrossScan:
    def test_shape(self):
        assert cross_scan(torch.randn(2, 3, 5, 7)).shape == (2, 4, 3, 35)

    @pytest.mark.parametrize("height,width", [(1, 1), (3, 5), (8, 8), (7, 2)])
    def test_routes_follow_index_lists(self, height, width):
        x = torch.randn(1, 2, height, width)
        xs = cross_scan(x)
        for k, order in enumerate(scan_orders(height, width)):
            assert torch.equal(xs[:, k], x.flatten(2)[:, :, order])

    @pytest.mark.parametrize("height,width", [(1, 4), (4, 4), (5, 3), (8, 8)])
    def test_merge_of_scan_is_four_times_identity(self, height, width):
        x = torch.randn(2, 3, height, width, dtype=F64)
        assert torch.equal(cross_merge(cross_scan(x), height, width), 4 * x)

    def test_merge_rejects_wrong_length(self):
        with pytest.raises(ConfigError):
            cross_merge(torch.randn(1, 4, 2, 10), 3, 3)


class TestSelectiveScan:
    @pytest.mark.parametrize("length,state", [(1, 1), (16, 4), (32, 8)])
    def test_matches_quadratic_oracle(self, length, state):
        gen = torch.Generator().manual_seed(length + state)
        inputs = _scan_inputs(gen, length=length, state=state)
        fast = selective_scan(**inputs)
        slow = selective_scan_quadratic(**inputs)
        torch.testing.assert_close(fast, slow, rtol=0, atol=1e-10)

    def test_grouped_projections(self):
        gen = torch.Generator().manual_seed(7)
        inputs = _scan_inputs(gen, channels=4, groups=2)
        torch.testing.assert_close(selective_scan(**inputs), selective_scan_quadratic(**inputs),
                                   rtol=0, atol=1e-10)

    def test_zero_input_stays_zero(self):
        gen = torch.Generator().manual_seed(3)
        inputs = _scan_inputs(gen)
        inputs["u"] = torch.zeros_like(inputs["u"])
        assert torch.equal(selective_scan(**inputs), torch.zeros_like(inputs["u"]))

    def test_single_step_closed_form(self):
        u = torch.tensor([[[2.0]]], dtype=F64)
        delta = torch.tensor([[[0.5]]], dtype=F64)
        A = torch.tensor([[-1.0]], dtype=F64)
        B = torch.tensor([[[3.0]]], dtype=F64)
        C = torch.tensor([[[4.0]]], dtype=F64)
        y = selective_scan(u, delta, A, B, C, delta_softplus=False)
        assert y.item() == pytest.approx(4.0 * 0.5 * 3.0 * 2.0)

    def test_decay_between_steps(self):
        u = torch.tensor([[[1.0, 0.0]]], dtype=F64)
        delta = torch.full((1, 1, 2), 0.5, dtype=F64)
        A = torch.tensor([[-2.0]], dtype=F64)
        ones = torch.ones(1, 1, 2, dtype=F64)
        y = selective_scan(u, delta, A, ones, ones, delta_softplus=False)
        assert y[0, 0, 1].item() == pytest.approx(0.5 * math.exp(-1.0))

    def test_dead_state_path_is_pure_skip(self):
        gen = torch.Generator().manual_seed(5)
        inputs = _scan_inputs(gen)
        inputs["A"] = torch.zeros_like(inputs["A"])
        inputs["B"] = torch.zeros_like(inputs["B"])
        y = selective_scan(**inputs)
        assert torch.equal(y, inputs["u"] * inputs["D"].view(1, -1, 1))

    def test_long_sequence_stays_finite(self):
        gen = torch.Generator().manual_seed(11)
        inputs = _scan_inputs(gen, channels=2, length=16384, state=2)
        assert torch.isfinite(selective_scan(**inputs)).all()

    def test_non_finite_input_raises(self):
        gen = torch.Generator().manual_seed(0)
        inputs = _scan_inputs(gen)
        inputs["u"][0, 0, 3] = float("nan")
        with pytest.raises(NumericalError, match="'u'"):
            selective_scan(**inputs)


class TestSS2D:
    def test_matches_staged_oracle(self):
        torch.manual_seed(0)
        ss2d = SS2D(4, state_dim=2).double()
        x = torch.randn(1, 4, 3, 3, dtype=F64)
        with torch.no_grad():
            torch.testing.assert_close(ss2d(x), ss2d_oracle(ss2d, x), rtol=0, atol=1e-10)

    def test_shape_and_dt_initialisation(self):
        torch.manual_seed(0)
        ss2d = SS2D(16, state_dim=8)
        assert ss2d(torch.randn(2, 16, 4, 6)).shape == (2, 16, 4, 6)
        dt = torch.nn.functional.softplus(ss2d.dt_projs_bias)
        assert dt.min() >= 1e-4 - 1e-7 and dt.max() <= 0.1 + 1e-6
        assert torch.allclose(-torch.exp(ss2d.A_logs[0]), -torch.arange(1, 9, dtype=torch.float32))

    def test_zero_output_projection_gives_zero_map(self):
        torch.manual_seed(0)
        ss2d = SS2D(8, state_dim=4)
        with torch.no_grad():
            ss2d.out_proj.weight.zero_()
            out = ss2d(torch.randn(2, 8, 5, 6))
        assert torch.equal(out, torch.zeros_like(out))

    def test_parameter_gradients(self):
        torch.manual_seed(2)
        assert module_gradcheck(SS2D(4, state_dim=2), [torch.randn(1, 4, 3, 3)]) < 1e-4


class TestFFM:
    @pytest.fixture
    def small(self):
        torch.manual_seed(0)
        return FFM(FFMConfig(fused_channels=8, out_channels=4, model_dim=4, state_dim=2)).double().eval()

    def test_matches_oracle(self, small):
        x = torch.randn(1, 4, 4, 4, dtype=F64)
        skip = torch.randn(1, 4, 4, 4, dtype=F64)
        with torch.no_grad():
            torch.testing.assert_close(small(x, skip), ffm_oracle(small, x, skip), rtol=0, atol=1e-10)

    def test_zero_ffn_returns_encoder_feature(self, small):
        with torch.no_grad():
            for layer in small.layers:
                layer.ffn.fc2.weight.zero_()
                layer.ffn.fc2.bias.zero_()
        x = torch.randn(1, 4, 4, 4, dtype=F64)
        with torch.no_grad():
            assert torch.equal(small(x, torch.randn(1, 4, 4, 4, dtype=F64)), x)

    def test_default_param_count(self):
        cfg = FFMConfig(fused_channels=208, out_channels=144)
        assert cfg.param_count() == 117680
        assert sum(p.numel() for p in FFM(cfg).parameters()) == cfg.param_count()

    @pytest.mark.parametrize("depth", [1, 2])
    def test_depth_stacks_layers(self, depth):
        cfg = FFMConfig(fused_channels=12, out_channels=8, model_dim=8, state_dim=2, depth=depth)
        ffm = FFM(cfg)
        assert len(ffm.layers) == depth
        assert sum(p.numel() for p in ffm.parameters()) == cfg.param_count()

    def test_spatial_mismatch(self, small):
        with pytest.raises(ConfigError, match="spatial size"):
            small(torch.randn(1, 4, 4, 4, dtype=F64), torch.randn(1, 4, 8, 8, dtype=F64))

    def test_channel_mismatch(self, small):
        with pytest.raises(ConfigError, match="channels"):
            small(torch.randn(1, 4, 4, 4, dtype=F64), torch.randn(1, 2, 4, 4, dtype=F64))

    def test_parameter_gradients(self):
        torch.manual_seed(3)
        ffm = FFM(FFMConfig(fused_channels=6, out_channels=4, model_dim=4, state_dim=2))
        err = module_gradcheck(ffm, [torch.randn(1, 4, 4, 4), torch.randn(1, 2, 4, 4)])
        assert err < 1e-4


@pytest.mark.slow
def test_scan_runtime_grows_linearly():
    def timed(length):
        gen = torch.Generator().manual_seed(0)
        inputs = _scan_inputs(gen, channels=16, length=length, state=8)
        selective_scan(**inputs)
        start = time.perf_counter()
        for _ in range(3):
            selective_scan(**inputs)
        return time.perf_counter() - start

    threads = torch.get_num_threads()
    torch.set_num_threads(1)
    try:
        assert timed(4096) / timed(512) <= 10
    finally:
        torch.set_num_threads(threads)
