"""Attention regulator: randomly zero labeled foreground pixels of the input
so the model cannot anchor on the annotated discriminative part alone.

`type="has"` and `type="cutout"` are baseline masking schemes kept only for
the masking-strategy ablation.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch

from .core import SupervisionMask


@dataclass(frozen=True)
class RegulatorConfig:
    mask_ratio: float = 0.5
    enabled: bool = True
    type: str = "ours"  # ours | has | cutout
    has_grid: int = 4
    cutout_side: Optional[int] = None  # default min(H, W) // 4

    def __post_init__(self) -> None:
        if not (0.0 <= self.mask_ratio <= 1.0):
            raise ValueError("mask_ratio must lie in [0, 1]")
        if self.type not in ("ours", "has", "cutout"):
            raise ValueError(f"unknown regulator type {self.type!r}")


def build_mask(sup: SupervisionMask, cfg: RegulatorConfig,
               rng: np.random.Generator) -> np.ndarray:
    """(H, W) float32 mask of {0, 1}; zeros land only inside the labeled
    foreground region, exactly floor(mask_ratio * |FG|) of them."""
    if cfg.type == "has":
        return _has_mask(sup.shape, cfg, rng)
    if cfg.type == "cutout":
        return _cutout_mask(sup.shape, cfg, rng)
    h, w = sup.shape
    mask = np.ones((h, w), dtype=np.float32)
    fg = sup.fg()
    n = int(fg.sum())
    if n == 0:
        return mask
    k = int(np.floor(cfg.mask_ratio * n))
    pool = np.ones(n, dtype=np.float32)
    pool[:k] = 0.0
    mask[fg] = rng.permutation(pool)
    return mask


def _has_mask(shape: tuple[int, int], cfg: RegulatorConfig,
              rng: np.random.Generator) -> np.ndarray:
    # hide-and-seek: drop whole grid patches anywhere in the image
    h, w = shape
    mask = np.ones((h, w), dtype=np.float32)
    gh = max(1, h // cfg.has_grid)
    gw = max(1, w // cfg.has_grid)
    for y0 in range(0, h, gh):
        for x0 in range(0, w, gw):
            if rng.random() < cfg.mask_ratio:
                mask[y0:y0 + gh, x0:x0 + gw] = 0.0
    return mask


def _cutout_mask(shape: tuple[int, int], cfg: RegulatorConfig,
                 rng: np.random.Generator) -> np.ndarray:
    # cutout: one fixed-size square hole, clipped at the borders
    h, w = shape
    side = cfg.cutout_side if cfg.cutout_side is not None else min(h, w) // 4
    mask = np.ones((h, w), dtype=np.float32)
    cy = int(rng.integers(h))
    cx = int(rng.integers(w))
    y0, y1 = max(0, cy - side // 2), min(h, cy + (side + 1) // 2)
    x0, x1 = max(0, cx - side // 2), min(w, cx + (side + 1) // 2)
    mask[y0:y1, x0:x1] = 0.0
    return mask


def apply_mask(image, mask):
    """Element-wise multiply, broadcasting (H, W) over channels."""
    if image.shape[-2:] != tuple(mask.shape[-2:]):
        raise ValueError(f"mask shape {mask.shape} does not match image {image.shape}")
    if isinstance(image, torch.Tensor):
        m = mask if isinstance(mask, torch.Tensor) else torch.from_numpy(np.asarray(mask))
        return image * m.to(image.dtype)
    return image * np.asarray(mask, dtype=image.dtype)
