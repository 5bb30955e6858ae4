import numpy as np
import pytest
import torch
from torch.func import functional_call

from helpers import grad_rel_error
from udair.adaptation import (AnchorSet, DomainAdaptationModule, compute_anchors, coral_loss, covariance,
                              restore_with_tta, select_anchor, tta_adapt)
from udair.backbone import UDAIR, forward_restore
from udair.config import ModelConfig, TtaConfig
from udair.errors import NumericError, SampleCountError, ShapeError
from udair.training import param_digest


def two_pass_covariance(x: np.ndarray) -> np.ndarray:
    centered = x - x.mean(axis=0)
    return centered.T @ centered / (len(x) - 1)


def small_model(variant="full"):
    cfg = ModelConfig(variant=variant, base_dim=4, levels=2)
    cfg.daam.dim, cfg.daam.codebook_size, cfg.daam.hidden = 4, 8, 4
    return UDAIR(cfg).eval()


def anchors_for(model, seed=0):
    rng = np.random.default_rng(seed)
    sets = [[rng.random((16, 16, 3)).astype(np.float32) for _ in range(2)] for _ in range(3)]
    return compute_anchors(model, sets, ["a", "b", "c"])


# --- covariance and CORAL ---

def test_covariance_hand_value():
    rows = torch.tensor([[1.0], [3.0]], dtype=torch.float64)
    assert float(covariance(rows)) == 2.0


@pytest.mark.parametrize("seed", range(5))
def test_covariance_matches_two_pass(seed):
    x = np.random.default_rng(seed).normal(size=(37, 5)) * 3 + 10
    got = covariance(torch.from_numpy(x)).numpy()
    np.testing.assert_allclose(got, two_pass_covariance(x), rtol=0, atol=1e-10)
    assert np.allclose(got, got.T)
    assert np.linalg.eigvalsh(got).min() > -1e-10


def test_covariance_needs_two_rows():
    with pytest.raises(SampleCountError):
        covariance(torch.zeros(1, 3))


def test_coral_hand_value_and_symmetry():
    assert float(coral_loss(torch.zeros(1, 1), torch.full((1, 1), 2.0))) == 1.0
    a, b = torch.randn(4, 4), torch.randn(4, 4)
    assert float(coral_loss(a, b)) == float(coral_loss(b, a))
    assert float(coral_loss(a, a)) == 0.0
    with pytest.raises(ShapeError):
        coral_loss(torch.zeros(2, 2), torch.zeros(3, 3))


@pytest.mark.parametrize("seed", range(5))
def test_coral_gradient_through_covariance(seed):
    gen = torch.Generator().manual_seed(seed)
    rows = torch.randn(6, 3, generator=gen, dtype=torch.float64)
    target = covariance(torch.randn(8, 3, generator=gen, dtype=torch.float64))
    assert grad_rel_error(lambda r: coral_loss(covariance(r), target), rows) <= 1e-4


# --- adapter module ---

def test_fresh_adapter_is_identity():
    dam = DomainAdaptationModule(6).double()
    feat = torch.randn(2, 6, 5, 5, dtype=torch.float64)
    assert (dam(feat) - feat).abs().max() <= 1e-7
    with pytest.raises(ShapeError):
        dam(torch.randn(1, 5, 4, 4, dtype=torch.float64))


@pytest.mark.parametrize("seed", range(3))
def test_adapter_gradients_match_finite_differences(seed):
    torch.manual_seed(seed)
    dam = DomainAdaptationModule(3).double()
    torch.nn.init.normal_(dam.project.weight, std=0.3)
    feat = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    w = torch.randn(1, 3, 4, 4, dtype=torch.float64)
    assert grad_rel_error(lambda f: (dam(f) * w).sum(), feat) <= 1e-4
    params = dict(dam.named_parameters())
    for name in ("expand.weight", "depthwise.weight", "se.reduce.weight", "project.weight", "project.bias"):
        def fn(v, name=name):
            return (functional_call(dam, {**params, name: v}, (feat,)) * w).sum()
        assert grad_rel_error(fn, params[name].detach()) <= 1e-4, name


def test_adapter_leaves_identity_after_one_step():
    dam = DomainAdaptationModule(4)
    feat = torch.randn(1, 4, 6, 6)
    opt = torch.optim.SGD(dam.parameters(), lr=0.1)
    (dam(feat) ** 2).sum().backward()
    opt.step()
    assert (dam(feat) - feat).abs().max() > 1e-4


# --- anchors ---

def test_anchor_on_constant_features():
    class Const(torch.nn.Module):
        def degradation_features(self, x):
            from udair.daam import DegradationFeature
            m = torch.ones(x.shape[0], 2, 2, 2) * torch.tensor([1.0, -2.0]).view(1, 2, 1, 1)
            return DegradationFeature(m, None, m, m)

    imgs = [[np.zeros((4, 4, 3), np.float32)] * 3]
    anchors = compute_anchors(Const(), imgs, ["x"])
    torch.testing.assert_close(anchors.means[0], torch.tensor([1.0, -2.0], dtype=torch.float64))
    assert torch.equal(anchors.covariances[0], torch.zeros(2, 2, dtype=torch.float64))
    assert int(anchors.counts[0]) == 12


def test_anchor_rows_match_direct_statistics():
    model = small_model()
    rng = np.random.default_rng(1)
    imgs = [rng.random((16, 16, 3)).astype(np.float32) for _ in range(3)]
    anchors = compute_anchors(model, [imgs], ["t"], batch_size=2)
    with torch.no_grad():
        x = torch.from_numpy(np.stack([im.transpose(2, 0, 1) for im in imgs]))
        rows = model.degradation_features(x).rows().double().numpy()
    np.testing.assert_allclose(anchors.means[0].numpy(), rows.mean(0), atol=1e-7)
    np.testing.assert_allclose(anchors.covariances[0].numpy(), two_pass_covariance(rows), atol=1e-7)


def _anchor_set(means):
    means = torch.tensor(means, dtype=torch.float64)
    t, d = means.shape
    return AnchorSet(means, torch.zeros(t, d, d, dtype=torch.float64), torch.ones(t), list(range(t)))


def test_select_anchor_cases():
    anchors = _anchor_set([[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]])
    assert select_anchor(torch.tensor([0.1, 5.0]), anchors) == 1
    assert select_anchor(torch.tensor([3.0, 2.9]), anchors) == 2
    tie = _anchor_set([[1.0, 0.0], [2.0, 0.0]])
    assert select_anchor(torch.tensor([1.0, 0.0]), tie) == 0
    with pytest.raises(NumericError):
        select_anchor(torch.zeros(2), anchors)


@pytest.mark.parametrize("seed", range(5))
def test_select_anchor_brute_force_and_scale_invariance(seed):
    rng = np.random.default_rng(seed)
    means = rng.normal(size=(5, 4))
    pooled = rng.normal(size=4)
    cos = [m @ pooled / (np.linalg.norm(m) * np.linalg.norm(pooled)) for m in means]
    anchors = _anchor_set(means.tolist())
    assert select_anchor(torch.from_numpy(pooled), anchors) == int(np.argmax(cos))
    assert select_anchor(torch.from_numpy(pooled * 42.0), anchors) == int(np.argmax(cos))


# --- test-time adaptation ---

def test_tta_trajectory_and_zero_steps():
    # an untrained codebook collapses rows onto one code, so use continuous features here
    model = small_model("no_codebook")
    anchors = anchors_for(model)
    x = torch.rand(1, 3, 16, 16)
    _, report = tta_adapt(model, x, anchors, TtaConfig(steps=0))
    assert len(report.coral_per_step) == 1
    # untrained features are tiny, so CORAL is ~1e-10 and plain descent needs a huge step
    _, report = tta_adapt(model, x, anchors, TtaConfig(steps=5, lr=1e8))
    assert len(report.coral_per_step) == 6
    assert report.coral_per_step[-1] < report.coral_per_step[0]
    _, report = tta_adapt(model, x, anchors, TtaConfig(steps=5, lr=1e-2, optimizer="adam"))
    assert report.coral_per_step[-1] < report.coral_per_step[0]


def test_tta_leaves_model_weights_untouched():
    model = small_model("no_codebook")
    anchors = anchors_for(model)
    before = {g: param_digest(model, [g]) for g in ("theta_r", "theta_a", "theta_da")}
    restore_with_tta(model, torch.rand(1, 3, 16, 16), anchors, TtaConfig(steps=5, lr=100.0))
    after = {g: param_digest(model, [g]) for g in ("theta_r", "theta_a", "theta_da")}
    assert before == after


def test_zero_step_tta_equals_plain_inference():
    model = small_model()
    anchors = anchors_for(model)
    x = torch.rand(2, 3, 16, 16)[:1]
    plain, _ = forward_restore(model, x)
    adapted, _ = restore_with_tta(model, x, anchors, TtaConfig(steps=0))
    assert (plain - adapted).abs().max() <= 1e-6


def test_plain_inference_never_calls_adapter():
    model = small_model()
    before = DomainAdaptationModule.total_calls
    forward_restore(model, torch.rand(1, 3, 16, 16))
    assert DomainAdaptationModule.total_calls == before
    assert model.dam.calls == 0


def test_reset_per_sample_is_independent():
    model = small_model("no_codebook")
    anchors = anchors_for(model)
    cfg = TtaConfig(steps=3, lr=1e8)
    x1, x2 = torch.rand(1, 3, 16, 16), torch.rand(1, 3, 16, 16)
    _, first = tta_adapt(model, x2, anchors, cfg)
    tta_adapt(model, x1, anchors, cfg)
    _, again = tta_adapt(model, x2, anchors, cfg)
    assert first.coral_per_step == again.coral_per_step
