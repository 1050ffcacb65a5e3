import pytest
import torch

from ecmnet.errors import ConfigError
from ecmnet.msau import MSAU, MSAUConfig
from ecmnet.oracles import module_gradcheck, msau_oracle


@pytest.fixture
def unit():
    torch.manual_seed(0)
    msau = MSAU(MSAUConfig(channels=4)).double()
    for m in msau.modules():
        if isinstance(m, torch.nn.BatchNorm2d):
            m.running_mean.uniform_(-0.5, 0.5)
            m.running_var.uniform_(0.5, 2.0)
    return msau.eval()


def test_param_count_closed_form():
    cfg = MSAUConfig(channels=32)
    assert cfg.param_count() == 5192
    assert sum(p.numel() for p in MSAU(cfg).parameters()) == 5192


@pytest.mark.parametrize("channels,norm_kind", [(8, "batch"), (48, "none"), (144, "batch")])
def test_param_count_matches_module(channels, norm_kind):
    cfg = MSAUConfig(channels=channels, norm_kind=norm_kind)
    assert sum(p.numel() for p in MSAU(cfg).parameters()) == cfg.param_count()


def test_matches_stepwise_oracle(unit):
    x = torch.randn(1, 4, 6, 6, dtype=torch.float64)
    expected = msau_oracle(unit, x)
    with torch.no_grad():
        x3, x4 = unit.channel_aggregation(x)
        close = dict(rtol=0, atol=1e-12)
        torch.testing.assert_close(unit.multi_scale(x), expected["x1"], **close)
        torch.testing.assert_close(unit.spatial_gate(x), expected["gate"], **close)
        torch.testing.assert_close(x3, expected["x3"], **close)
        torch.testing.assert_close(x4, expected["x4"], **close)
        torch.testing.assert_close(unit(x), expected["y"], **close)


def test_spatial_gate_is_width_wise(unit):
    x = torch.randn(1, 4, 3, 5, dtype=torch.float64)
    with torch.no_grad():
        gate = unit.spatial_gate(x)
    assert gate.shape == (1, 2, 1, 5)
    torch.testing.assert_close(gate, msau_oracle(unit, x)["gate"], rtol=0, atol=1e-12)


def test_every_gate_tap_is_trained():
    torch.manual_seed(0)
    msau = MSAU(MSAUConfig(channels=8))
    assert msau.gate_depthwise.weight.shape == (8, 1, 1, 7)
    msau(torch.randn(2, 8, 16, 16)).sum().backward()
    per_tap = msau.gate_depthwise.weight.grad.abs().sum(dim=(0, 1)).flatten()
    assert (per_tap > 0).all()


def test_gates_strictly_inside_unit_interval(unit):
    x = 5 * torch.randn(2, 4, 6, 6, dtype=torch.float64)
    with torch.no_grad():
        gate = unit.spatial_gate(x)
    assert ((gate > 0) & (gate < 1)).all()


def test_zero_weights_are_identity():
    msau = MSAU(MSAUConfig(channels=8))
    with torch.no_grad():
        for p in msau.parameters():
            p.zero_()
    x = torch.randn(2, 8, 5, 5)
    assert torch.equal(msau(x), x)


def test_constant_input_pools_agree(unit):
    x = torch.full((1, 4, 6, 6), 0.3, dtype=torch.float64)
    with torch.no_grad():
        x3, x4 = unit.channel_aggregation(x)
    torch.testing.assert_close(x3, x4)


def test_shape_preserved():
    msau = MSAU(MSAUConfig(channels=16))
    x = torch.randn(2, 16, 8, 12)
    assert msau(x).shape == x.shape


def test_parameter_gradients():
    torch.manual_seed(1)
    assert module_gradcheck(MSAU(MSAUConfig(channels=4)), [torch.randn(1, 4, 6, 6)]) < 1e-4


def test_wrong_channels():
    with pytest.raises(ConfigError, match="MSAU expects"):
        MSAU(MSAUConfig(channels=8))(torch.randn(1, 4, 6, 6))


@pytest.mark.parametrize("kwargs", [
    {"channels": 3},
    {"channels": 8, "kernel_set": ()},
    {"channels": 8, "kernel_set": (3, 4)},
    {"channels": 8, "gate_kernel": 6},
    {"channels": 8, "channel_reduction": 0},
])
def test_invalid_config(kwargs):
    with pytest.raises(ConfigError):
        MSAUConfig(**kwargs).validate()
