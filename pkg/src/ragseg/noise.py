"""Noise injectors for fused guide images and masks (robustness ablations).

The numpy functions are the reference implementations on plain arrays; the
trainer applies the same corruption patterns to torch tensors through
``apply_guide_noise`` so gradients keep flowing through untouched pixels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

NOISE_KINDS = ("none", "gaussian", "sp", "dropout")


@dataclass(frozen=True)
class NoiseConfig:
    kind: str = "none"
    sigma: float = 0.1
    density: float = 0.05
    drop_rate: float = 0.1
    seed: int = 0

    def validate(self) -> None:
        if self.kind not in NOISE_KINDS:
            raise ValueError(f"noise kind must be one of {NOISE_KINDS}, got {self.kind!r}")
        if self.kind == "gaussian" and self.sigma < 0:
            raise ValueError(f"sigma must be >= 0, got {self.sigma}")
        if self.kind == "sp" and not 0.0 <= self.density <= 1.0:
            raise ValueError(f"density must be in [0, 1], got {self.density}")
        if self.kind == "dropout" and not 0.0 <= self.drop_rate <= 1.0:
            raise ValueError(f"drop_rate must be in [0, 1], got {self.drop_rate}")


def add_gaussian(image: np.ndarray, sigma: float, seed: int) -> np.ndarray:
    """Add zero-mean Gaussian noise, then clamp to [0, 1]."""
    if sigma < 0:
        raise ValueError(f"sigma must be >= 0, got {sigma}")
    image = np.asarray(image)
    if sigma == 0:
        return image.copy()
    rng = np.random.default_rng(seed)
    noisy = image + rng.normal(0.0, sigma, size=image.shape)
    return np.clip(noisy, 0.0, 1.0).astype(image.dtype)


def _sp_pattern(shape, density: float, seed: int):
    rng = np.random.default_rng(seed)
    corrupt = rng.random(shape) < density
    salt = rng.random(shape) < 0.5
    return corrupt, salt


def add_salt_pepper(image: np.ndarray, density: float, seed: int) -> np.ndarray:
    """Set a Bernoulli(density) fraction of pixels to 0 or 1 with equal probability."""
    if not 0.0 <= density <= 1.0:
        raise ValueError(f"density must be in [0, 1], got {density}")
    image = np.asarray(image)
    if density == 0:
        return image.copy()
    corrupt, salt = _sp_pattern(image.shape, density, seed)
    out = image.copy()
    out[corrupt & salt] = 1.0
    out[corrupt & ~salt] = 0.0
    return out


def _dropout_pattern(shape, drop_rate: float, seed: int):
    rng = np.random.default_rng(seed)
    return rng.random(shape) < drop_rate


def add_dropout(image: np.ndarray, drop_rate: float, seed: int) -> np.ndarray:
    """Zero each pixel independently with probability drop_rate."""
    if not 0.0 <= drop_rate <= 1.0:
        raise ValueError(f"drop_rate must be in [0, 1], got {drop_rate}")
    image = np.asarray(image)
    if drop_rate == 0:
        return image.copy()
    dropped = _dropout_pattern(image.shape, drop_rate, seed)
    out = image.copy()
    out[dropped] = 0.0
    return out


def apply_guide_noise(guide_image: torch.Tensor, guide_mask: torch.Tensor,
                      cfg: NoiseConfig, seed: int) -> tuple[torch.Tensor, torch.Tensor]:
    """Corrupt a fused guide (image (3,H,W), mask (H,W)) per the configuration.

    Gaussian noise hits the image only; salt-and-pepper and dropout corrupt
    image and mask at the same pixel locations. Implemented with torch ops so
    gradients still flow through uncorrupted pixels.
    """
    cfg.validate()
    if cfg.kind == "none":
        return guide_image, guide_mask
    h, w = guide_mask.shape[-2:]
    if cfg.kind == "gaussian":
        rng = np.random.default_rng(seed)
        noise = torch.as_tensor(
            rng.normal(0.0, cfg.sigma, size=tuple(guide_image.shape)),
            dtype=guide_image.dtype,
        )
        return (guide_image + noise).clamp(0.0, 1.0), guide_mask
    if cfg.kind == "sp":
        corrupt, salt = _sp_pattern((h, w), cfg.density, seed)
        corrupt_t = torch.as_tensor(corrupt, dtype=guide_image.dtype)
        value_t = torch.as_tensor(salt.astype(np.float64), dtype=guide_image.dtype)
        img = guide_image * (1 - corrupt_t) + value_t * corrupt_t
        msk = guide_mask * (1 - corrupt_t) + value_t * corrupt_t
        return img, msk
    # dropout
    dropped = _dropout_pattern((h, w), cfg.drop_rate, seed)
    keep_t = torch.as_tensor(~dropped, dtype=guide_image.dtype)
    return guide_image * keep_t, guide_mask * keep_t
