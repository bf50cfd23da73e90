"""Segmentation side: backbone-agnostic interface, two desk-scale reference
backbones, the Dice + cross-entropy training loss, and prediction."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .fusion import CrossAttentionFusion, FusedGuide, FusedInput

DICE_EPS = 1e-6


def _gn(channels: int) -> nn.Module:
    return nn.GroupNorm(math.gcd(channels, 8), channels)


class TinyCNN(nn.Module):
    """3-level encoder-decoder with skip connections, ~50k parameters.

    Backbone contract: forward maps (B, 3, H, W) to per-pixel class logits
    (B, C, H, W); encode/decode expose the bottleneck for feature-level fusion.
    H and W must be divisible by 4.
    """

    def __init__(self, num_classes: int, width: int = 16):
        super().__init__()
        w = width
        self.enc1 = nn.Sequential(nn.Conv2d(3, w, 3, padding=1), _gn(w), nn.ReLU(inplace=True))
        self.enc2 = nn.Sequential(nn.Conv2d(w, 2 * w, 3, padding=1), _gn(2 * w), nn.ReLU(inplace=True))
        self.bottleneck = nn.Sequential(nn.Conv2d(2 * w, 3 * w, 3, padding=1), _gn(3 * w), nn.ReLU(inplace=True))
        self.dec2 = nn.Sequential(nn.Conv2d(5 * w, 2 * w, 3, padding=1), _gn(2 * w), nn.ReLU(inplace=True))
        self.dec1 = nn.Sequential(nn.Conv2d(3 * w, w, 3, padding=1), _gn(w), nn.ReLU(inplace=True))
        self.head = nn.Conv2d(w, num_classes, 1)
        self.pool = nn.MaxPool2d(2)
        self.num_classes = num_classes
        self.bottleneck_channels = 3 * w

    def encode(self, x: torch.Tensor):
        if x.shape[-1] % 4 or x.shape[-2] % 4:
            raise ValueError(f"tiny-cnn needs H, W divisible by 4, got {tuple(x.shape[-2:])}")
        e1 = self.enc1(x)
        e2 = self.enc2(self.pool(e1))
        b = self.bottleneck(self.pool(e2))
        return b, (e1, e2)

    def decode(self, b: torch.Tensor, skips) -> torch.Tensor:
        e1, e2 = skips
        d2 = self.dec2(torch.cat([F.interpolate(b, scale_factor=2, mode="nearest"), e2], dim=1))
        d1 = self.dec1(torch.cat([F.interpolate(d2, scale_factor=2, mode="nearest"), e1], dim=1))
        return self.head(d1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, skips = self.encode(x)
        return self.decode(b, skips)


class _AttnBlock(nn.Module):
    def __init__(self, dim: int, heads: int):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, 2 * dim), nn.GELU(), nn.Linear(2 * dim, dim))

    def forward(self, x):
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class TinyViT(nn.Module):
    """Patch-attention backbone: patch embedding, 2 transformer blocks, and a
    linear per-patch head upsampled back to the input resolution."""

    def __init__(self, num_classes: int, image_size: tuple[int, int],
                 patch: int = 8, dim: int = 32, depth: int = 2, heads: int = 4):
        super().__init__()
        h, w = image_size
        if h % patch or w % patch:
            raise ValueError(f"tiny-vit needs H, W divisible by patch={patch}, got {(h, w)}")
        self.patch = patch
        self.grid = (h // patch, w // patch)
        self.embed = nn.Conv2d(3, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(1, self.grid[0] * self.grid[1], dim))
        nn.init.trunc_normal_(self.pos, std=0.02)
        self.blocks = nn.ModuleList([_AttnBlock(dim, heads) for _ in range(depth)])
        self.head = nn.Linear(dim, num_classes)
        self.num_classes = num_classes
        self.bottleneck_channels = dim

    def encode(self, x: torch.Tensor):
        if x.shape[-2:] != (self.grid[0] * self.patch, self.grid[1] * self.patch):
            raise ValueError(
                f"tiny-vit was built for {self.grid[0] * self.patch}x"
                f"{self.grid[1] * self.patch} inputs, got {tuple(x.shape[-2:])}"
            )
        tokens = self.embed(x).flatten(2).transpose(1, 2) + self.pos
        for block in self.blocks:
            tokens = block(tokens)
        gh, gw = self.grid
        feats = tokens.transpose(1, 2).reshape(x.shape[0], -1, gh, gw)
        return feats, ()

    def decode(self, feats: torch.Tensor, skips=()) -> torch.Tensor:
        logits = self.head(feats.flatten(2).transpose(1, 2))
        gh, gw = self.grid
        logits = logits.transpose(1, 2).reshape(feats.shape[0], self.num_classes, gh, gw)
        return F.interpolate(logits, scale_factor=self.patch, mode="bilinear",
                             align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        feats, skips = self.encode(x)
        return self.decode(feats, skips)


BACKBONES = {
    "tiny-cnn": lambda num_classes, height, width: TinyCNN(num_classes),
    "tiny-vit": lambda num_classes, height, width: TinyViT(num_classes, (height, width)),
}


def register_backbone(name: str, factory) -> None:
    """Register an external backbone factory: f(num_classes, height, width) -> nn.Module."""
    BACKBONES[name] = factory


def build_backbone(name: str, num_classes: int, height: int, width: int) -> nn.Module:
    if name not in BACKBONES:
        raise ValueError(f"unknown backbone {name!r}; known: {sorted(BACKBONES)}")
    return BACKBONES[name](num_classes, height, width)


# --- losses and prediction ----------------------------------------------------

def soft_dice_mean(probabilities: torch.Tensor, gt_mask: torch.Tensor,
                   num_classes: int) -> torch.Tensor:
    """Mean soft Dice over all classes (background included).

    Accepts (C, H, W) + (H, W) or batched (B, C, H, W) + (B, H, W); batches
    average per-sample means. Probabilities must sum to 1 per pixel.
    """
    if probabilities.dim() == 3:
        probabilities = probabilities.unsqueeze(0)
        gt_mask = gt_mask.unsqueeze(0)
    if probabilities.shape[1] != num_classes:
        raise ValueError(f"expected {num_classes} class channels, got {probabilities.shape[1]}")
    totals = probabilities.sum(dim=1)
    if not torch.allclose(totals, torch.ones_like(totals), atol=1e-5):
        raise ValueError("probabilities do not sum to 1 per pixel")
    gt = torch.as_tensor(gt_mask, dtype=torch.long)
    one_hot = F.one_hot(gt, num_classes).permute(0, 3, 1, 2).to(probabilities.dtype)
    inter = (probabilities * one_hot).sum(dim=(2, 3))
    denom = probabilities.sum(dim=(2, 3)) + one_hot.sum(dim=(2, 3))
    dice = (2 * inter + DICE_EPS) / (denom + DICE_EPS)
    return dice.mean()


@dataclass
class LossValue:
    """Combined segmentation loss; total == dice_term + ce_term by construction."""

    total: torch.Tensor
    dice_term: torch.Tensor
    ce_term: torch.Tensor


def seg_loss(logits: torch.Tensor, gt_mask) -> LossValue:
    """(1 - mean soft Dice) plus pixel-mean multiclass cross-entropy."""
    batched = logits.dim() == 4
    gt = torch.as_tensor(gt_mask if torch.is_tensor(gt_mask) else np.array(gt_mask, copy=True),
                         dtype=torch.long)
    if not batched:
        logits = logits.unsqueeze(0)
        gt = gt.unsqueeze(0)
    num_classes = logits.shape[1]
    if logits.shape[-2:] != gt.shape[-2:] or logits.shape[0] != gt.shape[0]:
        raise ValueError(f"logits {tuple(logits.shape)} vs labels {tuple(gt.shape)}")
    if int(gt.max()) >= num_classes or int(gt.min()) < 0:
        raise ValueError(f"label values must be in [0, {num_classes - 1}]")
    probs = torch.softmax(logits, dim=1)
    dice_term = 1.0 - soft_dice_mean(probs, gt, num_classes)
    ce_term = F.cross_entropy(logits, gt)
    return LossValue(total=dice_term + ce_term, dice_term=dice_term, ce_term=ce_term)


def predict(backbone: nn.Module, x) -> np.ndarray:
    """Per-pixel argmax mask; ties resolve to the lowest class index."""
    if isinstance(x, FusedInput):
        x = x.projected
    t = torch.as_tensor(x if torch.is_tensor(x) else np.array(x, copy=True))
    if t.dim() == 2:
        t = t.unsqueeze(0).expand(3, -1, -1)
    if t.dim() != 3:
        raise ValueError(f"expected a (3, H, W) input, got shape {tuple(t.shape)}")
    was_training = backbone.training
    backbone.eval()
    with torch.no_grad():
        logits = backbone(t.to(next(backbone.parameters()).dtype).unsqueeze(0))[0]
    if was_training:
        backbone.train()
    return np.argmax(logits.cpu().numpy(), axis=0).astype(np.uint8)


# --- feature-level fusion wrappers ---------------------------------------------

class CrossAttentionSegmenter(nn.Module):
    """Backbone with cross-attention fusion at the deepest encoder level:
    query features attend onto guide-image features before decoding."""

    def __init__(self, backbone: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.attn = CrossAttentionFusion(backbone.bottleneck_channels)

    def forward(self, query: torch.Tensor, guide: FusedGuide) -> torch.Tensor:
        fq, skips = self.backbone.encode(query.unsqueeze(0))
        with_grad_guide = guide.image.unsqueeze(0)
        fg, _ = self.backbone.encode(with_grad_guide)
        fused = self.attn(fq[0], fg[0])
        return self.backbone.decode(fused.unsqueeze(0), skips)[0]


class DualEncoderSegmenter(nn.Module):
    """Separate guide encoder whose mask-modulated features are concatenated
    with the query bottleneck; the merge projection starts as an identity on
    the query half so training begins at the plain-backbone behaviour."""

    def __init__(self, backbone: nn.Module, guide_encoder: nn.Module):
        super().__init__()
        self.backbone = backbone
        self.guide_encoder = guide_encoder
        ch = backbone.bottleneck_channels
        self.merge = nn.Conv2d(2 * ch, ch, kernel_size=1)
        with torch.no_grad():
            self.merge.weight.zero_()
            self.merge.bias.zero_()
            for c in range(ch):
                self.merge.weight[c, c, 0, 0] = 1.0

    def forward(self, query: torch.Tensor, guide: FusedGuide) -> torch.Tensor:
        fq, skips = self.backbone.encode(query.unsqueeze(0))
        fg, _ = self.guide_encoder.encode(guide.image.unsqueeze(0))
        mask = guide.mask.unsqueeze(0).unsqueeze(0).to(fg.dtype)
        mask = F.interpolate(mask, size=fg.shape[-2:], mode="bilinear", align_corners=False)
        merged = self.merge(torch.cat([fq, fg * mask], dim=1))
        return self.backbone.decode(merged, skips)[0]
