import pytest
import torch

from udair.backbone import UDAIR, Restorer, TransformerBlock, forward_restore
from udair.config import ModelConfig
from udair.errors import ConfigurationError, ShapeError


def tiny(variant="full", kind="conv"):
    cfg = ModelConfig(variant=variant, block_kind=kind, base_dim=4, levels=2)
    cfg.daam.dim, cfg.daam.codebook_size, cfg.daam.hidden = 4, 8, 4
    return UDAIR(cfg).eval()


@pytest.mark.parametrize("size,expected", [(128, 16), (64, 8)])
def test_bottleneck_resolution(size, expected):
    r = Restorer(ModelConfig(base_dim=4, levels=3))
    enc = r.encode(torch.rand(1, 3, size, size))
    assert enc.bottleneck.shape == (1, 32, expected, expected)
    assert [s.shape[1] for s in enc.skips] == [4, 8, 16]


def test_indivisible_input_rejected():
    with pytest.raises(ShapeError):
        Restorer(ModelConfig(levels=3)).encode(torch.rand(1, 3, 100, 100))


@pytest.mark.parametrize("kind", ["conv", "transformer"])
@pytest.mark.parametrize("variant", ["full", "no_cscl", "no_codebook", "baseline"])
def test_output_shape_round_trip(kind, variant):
    model = tiny(variant, kind)
    out, feat = model(torch.rand(2, 3, 16, 24))
    assert out.shape == (2, 3, 16, 24)
    assert (feat is None) == (variant == "baseline")


def test_transformer_window_adapts_to_small_maps():
    block = TransformerBlock(8, heads=2, window=8)
    assert block(torch.rand(1, 8, 6, 4)).shape == (1, 8, 6, 4)


def test_degradation_features_reach_the_output():
    model = tiny()
    x = torch.rand(1, 3, 16, 16)
    enc = model.encode(x)
    deg = model.degradation_features(x).map
    with torch.no_grad():
        a = model.restorer.decode(enc, deg, x)
        b = model.restorer.decode(enc, deg + 1.0, x)
    assert (a - b).abs().max() > 1e-6


def test_injection_mismatch_is_configuration_error():
    model = tiny()
    x = torch.rand(1, 3, 16, 16)
    enc = model.encode(x)
    with pytest.raises(ConfigurationError):
        model.restorer.decode(enc, None, x)
    with pytest.raises(ConfigurationError):
        model.restorer.decode(enc, torch.zeros(1, 5, 4, 4), x)
    base = tiny("baseline")
    with pytest.raises(ConfigurationError):
        base.restorer.decode(base.encode(x), torch.zeros(1, 4, 4, 4), x)


@pytest.mark.parametrize("variant", ["baseline", "no_codebook"])
def test_codebook_unused_by_variant(variant):
    model = tiny(variant)
    x = torch.rand(1, 3, 16, 16)
    before, _ = forward_restore(model, x)
    with torch.no_grad():
        model.daam.codebook.codes.normal_()
    after, _ = forward_restore(model, x)
    assert torch.equal(before, after)


def test_no_codebook_still_depends_on_gate():
    model = tiny("no_codebook")
    x = torch.rand(1, 3, 16, 16)
    before, _ = forward_restore(model, x)
    with torch.no_grad():
        model.daam.gate.beta.fill_(0.7)
    after, _ = forward_restore(model, x)
    assert (before - after).abs().max() > 1e-6


def test_forward_is_deterministic():
    model = tiny()
    x = torch.rand(2, 3, 16, 16)
    a, fa = model(x)
    b, fb = model(x)
    assert torch.equal(a, b) and torch.equal(fa.map, fb.map)


def test_parameter_groups_partition_the_model():
    model = tiny()
    groups = model.param_groups()
    names = [n for g in groups.values() for n, _ in g]
    assert len(names) == len(set(names))
    assert set(names) == {n for n, _ in model.named_parameters()}
    assert all(groups[g] for g in ("theta_r", "theta_a", "theta_da"))


def test_forward_never_calls_adapter():
    model = tiny()
    model(torch.rand(1, 3, 16, 16))
    assert model.dam.calls == 0
