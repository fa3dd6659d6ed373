import pytest
import torch

from nowcast.data import DESK_GRID, GridSpec, generate_synthetic_event
from nowcast.errors import ConfigurationError, DomainError
from nowcast.models import (
    IMPROVEMENTS,
    BackboneConfig,
    BaselineUNet,
    ChannelConvAdapter,
    ViViT,
    adapt_repeat_interleave,
    build_model,
    load_checkpoint,
    resize_spatial,
    save_checkpoint,
    temporal_shift,
)

SMALL = GridSpec(side=32, sat_patch_side=8, resolution_ratio=4)


def _ctx(batch=1, grid=DESK_GRID, seed=0):
    g = torch.Generator().manual_seed(seed)
    return torch.randn(batch, *grid.context_shape, generator=g)


# configuration ----------------------------------------------------------------


@pytest.mark.parametrize("side", [250, 100, 48])
def test_swin_interp_side_guard(side):
    with pytest.raises(ConfigurationError, match="32"):
        BackboneConfig(family="swin_unetr", interp_side=side).validate()


def test_config_validation():
    with pytest.raises(ConfigurationError):
        BackboneConfig(family="cnn").validate()
    with pytest.raises(ConfigurationError):
        BackboneConfig(family="vivit", token_dim=50).validate()
    with pytest.raises(ConfigurationError):
        BackboneConfig(family="baseline", improvements={"dropout"}).validate()
    with pytest.raises(ConfigurationError):
        BackboneConfig(family="swin_unetr", adapter="tile").validate()
    with pytest.raises(ConfigurationError):
        BackboneConfig(family="swin_unetr", embed_dim=10, heads=(3, 3, 3)).validate()
    with pytest.raises(ConfigurationError):
        BackboneConfig.from_dict({"family": "vivit", "layers": 3})


def test_config_round_trip():
    cfg = BackboneConfig.desk("baseline")
    assert BackboneConfig.from_dict(cfg.to_dict()) == cfg
    assert cfg.improvements == frozenset(IMPROVEMENTS)


def test_vivit_patch_must_divide_grid():
    with pytest.raises(ConfigurationError):
        ViViT(DESK_GRID, token_dim=64, patch=12)


# baseline -----------------------------------------------------------------------


@pytest.mark.parametrize("imp", [frozenset(), frozenset(IMPROVEMENTS), frozenset({"attention_grid"})])
def test_baseline_shapes(imp):
    net = BaselineUNet(DESK_GRID, 4, 3, imp)
    out = net(_ctx(2))
    assert out.shape == (2, 32, 64, 64)


def test_baseline_odd_side():
    grid = GridSpec(side=36, sat_patch_side=6, resolution_ratio=6)
    assert BaselineUNet(grid, 4, 3)(_ctx(1, grid)).shape == (1, 32, 36, 36)


def test_rrelu_equals_relu_on_zero_input():
    torch.manual_seed(0)
    a = BaselineUNet(SMALL, 4, 2, frozenset())
    b = BaselineUNet(SMALL, 4, 2, frozenset({"rrelu"}))
    b.load_state_dict(a.state_dict())
    a.eval(), b.eval()
    with torch.no_grad():
        for m in list(a.modules()) + list(b.modules()):
            if isinstance(m, (torch.nn.Conv3d, torch.nn.Conv2d)):
                m.weight.zero_()
                if m.bias is not None:
                    m.bias.zero_()
    x = _ctx(1, SMALL)
    assert torch.equal(a(x), b(x))


def test_upsample_conv_has_no_transpose_convs():
    net = BaselineUNet(DESK_GRID, 4, 3, frozenset({"upsample_conv"}))
    assert not any(isinstance(m, torch.nn.ConvTranspose3d) for m in net.modules())
    assert not any("tconv" in n for n, _ in net.named_parameters())
    plain = BaselineUNet(DESK_GRID, 4, 3, frozenset())
    assert any("tconv" in n for n, _ in plain.named_parameters())


def test_attention_gate_channels():
    net = BaselineUNet(DESK_GRID, 8, 3, frozenset({"attention_grid"}))
    for gate in net.gates:
        assert gate.theta.out_channels == gate.theta.in_channels // 2


# ViViT ------------------------------------------------------------------------------


def test_vivit_token_map_and_shapes():
    grid = GridSpec(side=60, sat_patch_side=10, resolution_ratio=6)
    net = ViViT(grid, token_dim=64, patch=12, heads=4, spatial_depth=1, temporal_depth=1)
    assert net.map_side == 8
    const = torch.full((2, 64), 0.7)
    m = net.token_map(const)
    assert m.shape == (2, 1, 60, 60)
    torch.testing.assert_close(m, torch.full_like(m, 0.7))
    assert net(_ctx(2, grid)).shape == (2, 32, 60, 60)


def test_vivit_batch_independence():
    torch.manual_seed(0)
    net = ViViT(DESK_GRID, token_dim=64, patch=16, heads=4, spatial_depth=1, temporal_depth=1).eval()
    x = _ctx(2)
    joint = net(x)
    torch.testing.assert_close(joint[0:1], net(x[0:1]), atol=1e-5, rtol=1e-5)
    torch.testing.assert_close(joint[1:2], net(x[1:2]), atol=1e-5, rtol=1e-5)


def test_vivit_time_order_matters():
    torch.manual_seed(0)
    net = ViViT(DESK_GRID, token_dim=64, patch=16, heads=4, spatial_depth=1, temporal_depth=1).eval()
    x = _ctx(1)
    assert not torch.allclose(net(x), net(x.flip(2)))


# SWIN-UNETR adapters ---------------------------------------------------------------------


def test_repeat_interleave_mapping_and_shape():
    x = torch.randn(1, 11, 4, 21, 21)
    out = adapt_repeat_interleave(x, 32, 64)
    assert out.shape == (1, 11, 32, 64, 64)
    for i in range(8):
        assert torch.equal(out[:, :, i], out[:, :, 0])
    c = torch.full((1, 2, 4, 10, 10), 3.25)
    assert torch.equal(adapt_repeat_interleave(c, 32, 32), torch.full((1, 2, 32, 32, 32), 3.25))
    with pytest.raises(ConfigurationError):
        adapt_repeat_interleave(torch.randn(1, 1, 3, 4, 4), 32, 8)


@pytest.mark.slow
def test_repeat_interleave_full_shape():
    x = torch.randn(11, 4, 252, 252)
    assert adapt_repeat_interleave(x, 32, 256).shape == (11, 32, 256, 256)


def test_channel_conv_parameter_audit():
    ad = ChannelConvAdapter(4, 32, 64)
    kernels = sorted(tuple(p.shape) for n, p in ad.named_parameters() if p.dim() == 4)
    assert kernels == [(32, 4, 3, 3), (32, 32, 3, 3)]
    assert sum(p.dim() == 1 for p in ad.parameters()) == 2
    assert ad(torch.randn(1, 11, 4, 20, 20)).shape == (1, 11, 32, 64, 64)


def test_channel_conv_zero_weights_give_zero():
    ad = ChannelConvAdapter(4, 32, 32)
    with torch.no_grad():
        for p in ad.parameters():
            p.zero_()
    y = ad.conv1(resize_spatial(torch.randn(1, 11, 4, 16, 16), 32).reshape(11, 4, 32, 32))
    assert not y.any()
    assert not ad(torch.randn(1, 11, 4, 16, 16)).any()


@pytest.mark.parametrize("adapter", ["repeat_interleave", "channel_conv", "upsample_decoder"])
def test_swin_desk_forward(adapter):
    model = build_model(BackboneConfig.desk("swin_unetr", adapter), DESK_GRID, seed=0)
    out = model(_ctx(1))
    assert out.shape == (1, 32, 64, 64) and torch.isfinite(out).all()


def test_swin_three_stage_desk_config():
    cfg = BackboneConfig(family="swin_unetr", interp_side=64, embed_dim=24, depths=(2, 2, 2), heads=(2, 2, 2))
    out = build_model(cfg, DESK_GRID, seed=0)(_ctx(1))
    assert out.shape == (1, 32, 64, 64) and torch.isfinite(out).all()


def test_forward_checks_input_shape():
    model = build_model(BackboneConfig.desk("baseline"), DESK_GRID, seed=0)
    with pytest.raises(DomainError):
        model(torch.randn(1, 11, 4, 32, 32))


# temporal shift, prediction and checkpoints ---------------------------------------------------


def test_temporal_shift_examples():
    d = torch.zeros(1, 32, 2, 2)
    d[:, 0] = 1.5
    assert torch.equal(temporal_shift(d), torch.full_like(d, 1.5))
    t = torch.randn(1, 32, 3, 3, dtype=torch.float64)
    torch.testing.assert_close(temporal_shift(t)[:, 31], t.sum(dim=1))


def test_temporal_shift_inside_model():
    cfg = BackboneConfig.desk("baseline", temporal_shift=True)
    shifted = build_model(cfg, DESK_GRID, seed=3)
    plain = build_model(BackboneConfig.desk("baseline"), DESK_GRID, seed=3)
    plain.load_state_dict(shifted.state_dict())
    x = _ctx(1)
    shifted.eval(), plain.eval()
    torch.testing.assert_close(shifted(x), torch.cumsum(plain(x), dim=1))


def test_predict_returns_probabilities():
    model = build_model(BackboneConfig.desk("vivit"), DESK_GRID, seed=0)
    ctx, _ = generate_synthetic_event(0, DESK_GRID)
    out = model.predict(ctx)
    assert out.probs.values.shape == (32, 64, 64)
    assert out.probs.values.min() >= 0 and out.probs.values.max() <= 1
    assert out.probs.region_id == ctx.region_id
    assert model.training


def test_checkpoint_round_trip(tmp_path):
    model = build_model(BackboneConfig.desk("swin_unetr", "channel_conv"), DESK_GRID, seed=0)
    path = save_checkpoint(tmp_path / "m.pt", model, step=17, note="x")
    back, step, extra = load_checkpoint(path)
    assert step == 17 and extra == {"note": "x"}
    assert back.cfg == model.cfg and back.grid == model.grid
    for (k, a), (_, b) in zip(model.state_dict().items(), back.state_dict().items()):
        assert torch.equal(a, b), k
    assert save_checkpoint(tmp_path / "n.pt", back, step=17, note="x").read_bytes() == path.read_bytes()


def test_missing_checkpoint(tmp_path):
    with pytest.raises(DomainError):
        load_checkpoint(tmp_path / "none.pt")


def test_build_model_is_seeded():
    a = build_model(BackboneConfig.desk("vivit"), DESK_GRID, seed=5)
    b = build_model(BackboneConfig.desk("vivit"), DESK_GRID, seed=5)
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)
