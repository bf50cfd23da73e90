"""Guide fusion: similarity-softmax weights, weighted guide compositing, and
the three query/guide merge strategies (early channel fusion, cross-attention,
dual-encoder modulation)."""

from __future__ import annotations

import math
from dataclasses import dataclass
from enum import Enum

import torch
import torch.nn as nn
import torch.nn.functional as F

from .retrieval import RetrievalHit


class FusionStrategy(str, Enum):
    EARLY = "early"
    CROSS_ATTENTION = "xattn"
    DUAL_ENCODER = "dual"


@dataclass(frozen=True)
class FusionConfig:
    tau_fusion: float = 0.1
    strategy: FusionStrategy = FusionStrategy.EARLY

    def validate(self) -> None:
        if self.tau_fusion <= 0:
            raise ValueError(f"tau_fusion must be > 0, got {self.tau_fusion}")


@dataclass
class FusionWeights:
    """Softmax weights over retrieval hits; non-negative, sum to 1, ordered
    like the hit list they were computed from."""

    weights: torch.Tensor  # (k,)

    def __len__(self) -> int:
        return int(self.weights.shape[0])

    def tolist(self) -> list[float]:
        return [float(w) for w in self.weights.detach()]


def fusion_weights(similarities, tau_fusion: float) -> FusionWeights:
    """Temperature-scaled softmax over similarities, max-subtracted for stability.

    Differentiable with respect to the similarities when they are torch
    tensors that carry gradients.
    """
    if tau_fusion <= 0:
        raise ValueError(f"tau_fusion must be > 0, got {tau_fusion}")
    if torch.is_tensor(similarities):
        sims = similarities.reshape(-1)
    elif len(similarities) and torch.is_tensor(similarities[0]):
        sims = torch.stack(list(similarities))
    else:
        sims = torch.as_tensor(list(similarities), dtype=torch.float64)
    if sims.numel() == 0:
        raise ValueError("similarities must be non-empty")
    scaled = sims / tau_fusion
    scaled = scaled - scaled.max().detach()
    return FusionWeights(weights=torch.softmax(scaled, dim=0))


@dataclass
class FusedGuide:
    """Weighted composite of the retrieved guides: a 3-channel image and a
    soft mask with values in [0, 1]."""

    image: torch.Tensor  # (3, H, W)
    mask: torch.Tensor   # (H, W)


def fuse_guides(hits: list[RetrievalHit], weights: FusionWeights,
                num_classes: int) -> FusedGuide:
    """Pixelwise weighted sum of guide images and label-scaled guide masks.

    Labels are divided by (num_classes - 1) before weighting so the fused mask
    stays a bounded [0, 1] channel. Differentiable with respect to the weights.
    """
    if not hits:
        raise ValueError("need at least one retrieval hit")
    if len(hits) != len(weights):
        raise ValueError(f"{len(hits)} hits but {len(weights)} weights")
    shape = tuple(hits[0].guide_image.shape)
    for h in hits:
        if tuple(h.guide_image.shape) != shape or tuple(h.guide_mask.shape) != shape[1:]:
            raise ValueError("guide shapes disagree across hits")
    w = weights.weights
    dtype = w.dtype if w.is_floating_point() else torch.float32
    images = torch.stack([h.guide_image.to(dtype) for h in hits])
    masks = torch.stack([h.guide_mask.to(dtype) for h in hits]) / (num_classes - 1)
    image = torch.einsum("k,kchw->chw", w.to(dtype), images)
    mask = torch.einsum("k,khw->hw", w.to(dtype), masks)
    # weights sum to 1 only within float epsilon; keep the soft mask in [0, 1]
    return FusedGuide(image=image, mask=mask.clamp(0.0, 1.0))


class ChannelAdapter(nn.Module):
    """Pointwise 7->3 channel projection, initialized to pass the query
    channels through unchanged so the guided input starts identical to the
    plain segmentation input."""

    def __init__(self, in_channels: int = 7, out_channels: int = 3):
        super().__init__()
        self.proj = nn.Conv2d(in_channels, out_channels, kernel_size=1, bias=True)
        with torch.no_grad():
            self.proj.weight.zero_()
            self.proj.bias.zero_()
            for c in range(out_channels):
                self.proj.weight[c, c, 0, 0] = 1.0

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.proj(x)


@dataclass
class FusedInput:
    """Query and fused guide stacked as 7 channels, plus the 3-channel
    adapter projection fed to the backbone. Channel order is fixed:
    [query x3, guide image x3, guide mask]."""

    raw: torch.Tensor        # (7, H, W)
    projected: torch.Tensor  # (3, H, W)


def early_fuse(query: torch.Tensor, guide: FusedGuide, adapter: ChannelAdapter) -> FusedInput:
    """Concatenate query and fused guide along channels and project to 3 channels."""
    if query.shape[-2:] != guide.image.shape[-2:] or query.shape[-2:] != guide.mask.shape[-2:]:
        raise ValueError(
            f"query {tuple(query.shape)} and guide {tuple(guide.image.shape)} "
            "spatial shapes disagree"
        )
    raw = torch.cat([query, guide.image, guide.mask.unsqueeze(0)], dim=0)
    projected = adapter(raw.unsqueeze(0))[0]
    return FusedInput(raw=raw, projected=projected)


class CrossAttentionFusion(nn.Module):
    """Single-head scaled dot-product attention from query features onto guide
    features, added residually. The output projection starts at zero so the
    module is an identity on query features until trained."""

    def __init__(self, channels: int):
        super().__init__()
        self.channels = channels
        self.to_q = nn.Linear(channels, channels)
        self.to_k = nn.Linear(channels, channels)
        self.to_v = nn.Linear(channels, channels)
        self.to_out = nn.Linear(channels, channels)
        with torch.no_grad():
            self.to_out.weight.zero_()
            self.to_out.bias.zero_()

    def forward(self, query_features: torch.Tensor, guide_features: torch.Tensor,
                return_attention: bool = False):
        if query_features.shape[0] != guide_features.shape[0]:
            raise ValueError(
                f"channel mismatch: query {query_features.shape[0]} vs "
                f"guide {guide_features.shape[0]}"
            )
        c, h, w = query_features.shape
        q = self.to_q(query_features.flatten(1).T)          # (HW, C)
        k = self.to_k(guide_features.flatten(1).T)          # (H'W', C)
        v = self.to_v(guide_features.flatten(1).T)
        attn = torch.softmax(q @ k.T / math.sqrt(c), dim=-1)
        mixed = self.to_out(attn @ v)                        # (HW, C)
        out = query_features + mixed.T.reshape(c, h, w)
        if return_attention:
            return out, attn
        return out


def cross_attention_fuse(query_features: torch.Tensor, guide_features: torch.Tensor,
                         attention: CrossAttentionFusion) -> torch.Tensor:
    """Residual cross-attention merge of guide features into query features."""
    return attention(query_features, guide_features)


def dual_encoder_fuse(query: torch.Tensor, guide: FusedGuide, query_encoder,
                      guide_encoder) -> torch.Tensor:
    """Encode query and guide separately, modulate guide features by the
    downsampled fused mask, and concatenate along channels."""
    qf = query_encoder(query.unsqueeze(0))[0]
    gf = guide_encoder(guide.image.unsqueeze(0))[0]
    if qf.shape[-2:] != gf.shape[-2:]:
        raise ValueError(
            f"encoders produced misaligned feature maps: {tuple(qf.shape)} vs "
            f"{tuple(gf.shape)}"
        )
    mask = guide.mask.unsqueeze(0).unsqueeze(0).to(gf.dtype)
    mask = F.interpolate(mask, size=gf.shape[-2:], mode="bilinear", align_corners=False)
    return torch.cat([qf, gf * mask[0]], dim=0)
