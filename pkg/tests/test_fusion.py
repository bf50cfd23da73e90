import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ragseg.fusion import (ChannelAdapter, CrossAttentionFusion, FusedGuide,
                           FusionConfig, FusionStrategy, cross_attention_fuse,
                           dual_encoder_fuse, early_fuse, fuse_guides,
                           fusion_weights)
from ragseg.retrieval import RetrievalHit


def _hit(image, mask, sim=0.9, pid="g"):
    return RetrievalHit(kb_index=0, patient_id=pid, phase="ED", slice_index=0,
                        similarity=torch.as_tensor(sim, dtype=torch.float64),
                        guide_image=image, guide_mask=mask)


# --- fusion_weights -------------------------------------------------------------

def test_weights_symmetry():
    w = fusion_weights([0.8, 0.8], 0.1)
    assert w.tolist() == pytest.approx([0.5, 0.5], abs=1e-12)


def test_weights_singleton():
    assert fusion_weights([0.3], 2.0).tolist() == pytest.approx([1.0])


def test_weights_hand_value():
    w = fusion_weights([0.9, 0.7], 0.1)
    assert w.tolist() == pytest.approx([0.8808, 0.1192], abs=1e-4)


def test_weights_errors():
    with pytest.raises(ValueError):
        fusion_weights([], 0.1)
    with pytest.raises(ValueError):
        fusion_weights([0.5], 0.0)


@given(st.lists(st.floats(-1, 1), min_size=1, max_size=12),
       st.floats(1e-3, 1e3))
@settings(max_examples=200, deadline=None)
def test_weights_simplex(sims, tau):
    w = np.array(fusion_weights(sims, tau).tolist())
    assert (w >= 0).all()
    assert abs(w.sum() - 1.0) <= 1e-6


def test_weights_order_preserving():
    rng = np.random.default_rng(0)
    for _ in range(200):
        sims = rng.uniform(-1, 1, size=rng.integers(2, 10))
        tau = float(rng.uniform(0.05, 5.0))
        w = np.array(fusion_weights(sims, tau).tolist())
        for i in range(len(sims)):
            for j in range(len(sims)):
                if sims[i] > sims[j]:
                    assert w[i] > w[j]


def test_weights_temperature_limits():
    rng = np.random.default_rng(1)
    for _ in range(50):
        sims = rng.uniform(-1, 1, size=8)
        flat = np.array(fusion_weights(sims, 1e6).tolist())
        assert np.abs(flat - 1.0 / 8).max() < 1e-3
        if np.sort(sims)[-1] - np.sort(sims)[-2] > 1e-4:  # unique max
            sharp = np.array(fusion_weights(sims, 1e-6).tolist())
            assert sharp[int(np.argmax(sims))] > 1 - 1e-3


def test_weights_differentiable():
    sims = torch.tensor([0.9, 0.4, 0.1], dtype=torch.float64, requires_grad=True)
    w = fusion_weights(sims, 0.2)
    w.weights[0].backward()
    assert sims.grad is not None and float(sims.grad.abs().max()) > 0


def test_weights_gradient_matches_finite_difference():
    sims = torch.tensor([0.8, 0.3, -0.2], dtype=torch.float64, requires_grad=True)
    tau = 0.3
    w = fusion_weights(sims, tau)
    loss = (w.weights * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum()
    loss.backward()
    analytic = sims.grad.clone()
    h = 1e-7
    for i in range(3):
        up = sims.detach().clone(); up[i] += h
        dn = sims.detach().clone(); dn[i] -= h
        f = lambda s: float((fusion_weights(s, tau).weights
                             * torch.tensor([1.0, 2.0, 3.0], dtype=torch.float64)).sum())
        fd = (f(up) - f(dn)) / (2 * h)
        assert abs(fd - float(analytic[i])) <= 1e-3 * max(1.0, abs(fd))


# --- fuse_guides ------------------------------------------------------------------

def test_fuse_single_hit_identity():
    img = torch.rand(3, 8, 8)
    msk = torch.randint(0, 4, (8, 8))
    guide = fuse_guides([_hit(img, msk)], fusion_weights([0.9], 0.1), num_classes=4)
    assert torch.allclose(guide.image, img.double())
    assert torch.allclose(guide.mask, msk.double() / 3)


def test_fuse_duplicate_guides_idempotent():
    img = torch.rand(3, 8, 8)
    msk = torch.randint(0, 4, (8, 8))
    hits = [_hit(img, msk), _hit(img, msk)]
    guide = fuse_guides(hits, fusion_weights([0.5, 0.5], 1.0), num_classes=4)
    assert torch.allclose(guide.image, img.double(), atol=1e-12)
    assert torch.allclose(guide.mask, msk.double() / 3, atol=1e-12)


def test_fuse_hand_value_masks():
    zeros = torch.zeros(8, 8, dtype=torch.long)
    full = torch.full((8, 8), 3, dtype=torch.long)
    img = torch.zeros(3, 8, 8)
    hits = [_hit(img, zeros), _hit(img, full)]
    w = fusion_weights(torch.log(torch.tensor([0.25, 0.75], dtype=torch.float64)), 1.0)
    assert w.tolist() == pytest.approx([0.25, 0.75], abs=1e-12)
    guide = fuse_guides(hits, w, num_classes=4)
    assert torch.allclose(guide.mask, torch.full((8, 8), 0.75, dtype=torch.float64))


def test_fuse_mask_range_bounded():
    rng = np.random.default_rng(2)
    for _ in range(20):
        k = int(rng.integers(1, 5))
        hits = [_hit(torch.rand(3, 6, 6), torch.randint(0, 4, (6, 6))) for _ in range(k)]
        guide = fuse_guides(hits, fusion_weights(rng.uniform(-1, 1, k), 0.2), 4)
        assert float(guide.mask.min()) >= 0.0
        assert float(guide.mask.max()) <= 1.0


def test_fuse_shape_mismatch():
    hits = [_hit(torch.rand(3, 8, 8), torch.zeros(8, 8, dtype=torch.long)),
            _hit(torch.rand(3, 6, 6), torch.zeros(6, 6, dtype=torch.long))]
    with pytest.raises(ValueError):
        fuse_guides(hits, fusion_weights([0.5, 0.5], 1.0), 4)
    with pytest.raises(ValueError):
        fuse_guides(hits[:1], fusion_weights([0.5, 0.5], 1.0), 4)


# --- early fusion -----------------------------------------------------------------

def test_early_fuse_identity_at_init():
    adapter = ChannelAdapter()
    query = torch.rand(3, 16, 16)
    guide = FusedGuide(image=torch.rand(3, 16, 16), mask=torch.rand(16, 16))
    fused = early_fuse(query, guide, adapter)
    assert fused.raw.shape == (7, 16, 16)
    assert torch.equal(fused.projected, query)


def test_early_fuse_seven_channels_always():
    adapter = ChannelAdapter()
    for hw in (16, 24):
        query = torch.rand(3, hw, hw)
        guide = FusedGuide(image=torch.rand(3, hw, hw), mask=torch.rand(hw, hw))
        assert early_fuse(query, guide, adapter).raw.shape[0] == 7


def test_early_fuse_guide_invariant_at_identity_init():
    adapter = ChannelAdapter()
    query = torch.rand(3, 8, 8)
    g1 = FusedGuide(image=torch.rand(3, 8, 8), mask=torch.rand(8, 8))
    g0 = FusedGuide(image=torch.zeros(3, 8, 8), mask=torch.zeros(8, 8))
    assert torch.equal(early_fuse(query, g1, adapter).projected,
                       early_fuse(query, g0, adapter).projected)


def test_early_fuse_shape_mismatch():
    adapter = ChannelAdapter()
    guide = FusedGuide(image=torch.rand(3, 8, 8), mask=torch.rand(8, 8))
    with pytest.raises(ValueError):
        early_fuse(torch.rand(3, 6, 6), guide, adapter)


def test_early_fuse_gradient_through_similarity_finite_difference():
    """End-to-end gradient path: similarity -> weights -> guide -> adapter output."""
    torch.manual_seed(0)
    adapter = ChannelAdapter().double()
    with torch.no_grad():  # move off the identity so guide channels matter
        adapter.proj.weight.add_(0.1 * torch.randn_like(adapter.proj.weight))
    imgs = [torch.rand(3, 8, 8, dtype=torch.float64) for _ in range(2)]
    msks = [torch.randint(0, 4, (8, 8)) for _ in range(2)]
    query = torch.rand(3, 8, 8, dtype=torch.float64)
    probe = torch.randn(3, 8, 8, dtype=torch.float64)

    def forward(sims):
        hits = [_hit(imgs[i], msks[i], sim=sims[i]) for i in range(2)]
        w = fusion_weights(torch.stack([h.similarity for h in hits]), 0.2)
        guide = fuse_guides(hits, w, 4)
        return (early_fuse(query, guide, adapter).projected * probe).sum()

    sims = torch.tensor([0.9, 0.6], dtype=torch.float64, requires_grad=True)
    out = forward(sims)
    out.backward()
    h = 1e-6
    with torch.no_grad():
        for i in range(2):
            up = sims.detach().clone(); up[i] += h
            dn = sims.detach().clone(); dn[i] -= h
            fd = (float(forward(up)) - float(forward(dn))) / (2 * h)
            rel = abs(fd - float(sims.grad[i])) / max(1e-12, abs(fd))
            assert rel <= 1e-3


# --- cross-attention -----------------------------------------------------------------

def test_xattn_zero_init_output_is_identity():
    torch.manual_seed(0)
    attn = CrossAttentionFusion(8)
    q = torch.rand(8, 4, 4)
    g = torch.rand(8, 5, 5)
    out = cross_attention_fuse(q, g, attn)
    assert torch.equal(out, q)


def test_xattn_rows_sum_to_one():
    torch.manual_seed(1)
    attn = CrossAttentionFusion(8)
    q = torch.rand(8, 4, 4)
    g = torch.rand(8, 3, 3)
    _, a = attn(q, g, return_attention=True)
    assert a.shape == (16, 9)
    sums = a.sum(dim=-1)
    assert torch.allclose(sums, torch.ones_like(sums), atol=1e-6)


def test_xattn_single_guide_position_gets_full_weight():
    torch.manual_seed(2)
    attn = CrossAttentionFusion(8)
    q = torch.rand(8, 4, 4)
    g = torch.rand(8, 1, 1)
    _, a = attn(q, g, return_attention=True)
    assert torch.allclose(a, torch.ones(16, 1))


def test_xattn_channel_mismatch():
    attn = CrossAttentionFusion(8)
    with pytest.raises(ValueError):
        attn(torch.rand(8, 4, 4), torch.rand(4, 4, 4))


# --- dual encoder ---------------------------------------------------------------------

class _ToyEncoder(torch.nn.Module):
    """Halves the resolution and doubles channels, linear for easy checks."""

    def __init__(self):
        super().__init__()
        self.conv = torch.nn.Conv2d(3, 6, 2, stride=2, bias=False)

    def forward(self, x):
        return self.conv(x)


def test_dual_zero_mask_annihilates_guide():
    torch.manual_seed(0)
    enc_q, enc_g = _ToyEncoder(), _ToyEncoder()
    guide = FusedGuide(image=torch.rand(3, 8, 8), mask=torch.zeros(8, 8))
    out = dual_encoder_fuse(torch.rand(3, 8, 8), guide, enc_q, enc_g)
    assert out.shape == (12, 4, 4)
    assert torch.equal(out[6:], torch.zeros(6, 4, 4))


def test_dual_ones_mask_passes_guide_unmodulated():
    torch.manual_seed(1)
    enc_q, enc_g = _ToyEncoder(), _ToyEncoder()
    img = torch.rand(3, 8, 8)
    guide = FusedGuide(image=img, mask=torch.ones(8, 8))
    out = dual_encoder_fuse(torch.rand(3, 8, 8), guide, enc_q, enc_g)
    expected = enc_g(img.unsqueeze(0))[0]
    assert torch.allclose(out[6:], expected)


def test_dual_halving_mask_halves_guide_block():
    torch.manual_seed(2)
    enc_q, enc_g = _ToyEncoder(), _ToyEncoder()
    img = torch.rand(3, 8, 8)
    mask = torch.rand(8, 8)
    full = dual_encoder_fuse(torch.rand(3, 8, 8), FusedGuide(image=img, mask=mask),
                             enc_q, enc_g)
    half = dual_encoder_fuse(torch.rand(3, 8, 8), FusedGuide(image=img, mask=mask / 2),
                             enc_q, enc_g)
    assert torch.equal(half[6:], full[6:] / 2)


def test_dual_misaligned_encoders_rejected():
    class _Other(torch.nn.Module):
        def forward(self, x):
            return x[:, :, ::4, ::4]

    guide = FusedGuide(image=torch.rand(3, 8, 8), mask=torch.ones(8, 8))
    with pytest.raises(ValueError):
        dual_encoder_fuse(torch.rand(3, 8, 8), guide, _ToyEncoder(), _Other())


def test_fusion_config_validation():
    with pytest.raises(ValueError):
        FusionConfig(tau_fusion=0.0).validate()
    assert FusionConfig(strategy=FusionStrategy.EARLY).strategy.value == "early"
