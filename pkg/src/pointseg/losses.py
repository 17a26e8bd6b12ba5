"""Partial cross-entropy over labeled pixels and the unit-weighted total."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np
import torch

from .core import FG, SupervisionMask

EPS = 1e-7


def partial_ce(pred: Union[torch.Tensor, np.ndarray],
               sup: Union[SupervisionMask, torch.Tensor, np.ndarray],
               reduction: str = "mean", eps: float = EPS):
    """Cross-entropy restricted to labeled pixels; unlabeled pixels never
    enter the computation (they are indexed away, not masked by zeros).

    `sup` is a SupervisionMask or a raw tri-state label array/tensor.
    """
    if reduction not in ("mean", "sum"):
        raise ValueError("reduction must be 'mean' or 'sum'")
    labels = sup.labels if isinstance(sup, SupervisionMask) else sup
    if isinstance(pred, torch.Tensor):
        if not isinstance(labels, torch.Tensor):
            labels = torch.from_numpy(np.asarray(labels))
        labels = labels.to(pred.device)
        if pred.shape != labels.shape:
            raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(labels.shape)}")
        sel = labels != -1
        if not bool(sel.any()):
            raise ValueError("empty supervision")
        p = pred[sel].clamp(eps, 1 - eps)
        s = (labels[sel] == FG).to(p.dtype)
        terms = -(s * p.log() + (1 - s) * (1 - p).log())
        return terms.mean() if reduction == "mean" else terms.sum()
    labels = np.asarray(labels)
    pred = np.asarray(pred)
    if pred.shape != labels.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {labels.shape}")
    sel = labels != -1
    if not sel.any():
        raise ValueError("empty supervision")
    p = np.clip(pred[sel], eps, 1 - eps)
    s = (labels[sel] == FG).astype(p.dtype)
    terms = -(s * np.log(p) + (1 - s) * np.log(1 - p))
    return float(terms.mean() if reduction == "mean" else terms.sum())


def total_loss(l_c, l_pce):
    """Unit-weighted sum; the weights are fixed on purpose."""
    for name, v in (("l_c", l_c), ("l_pce", l_pce)):
        val = float(v.detach()) if isinstance(v, torch.Tensor) else float(v)
        if not math.isfinite(val):
            raise ValueError(f"non-finite {name}: {val}")
    return l_c + l_pce


@dataclass(frozen=True)
class LossReport:
    l_pce: float
    l_c: float
    total: float
    labeled_count: int

    def __post_init__(self) -> None:
        for v in (self.l_pce, self.l_c, self.total):
            if not math.isfinite(v):
                raise ValueError("non-finite loss component")
        if not math.isclose(self.total, self.l_c + self.l_pce,
                            rel_tol=1e-9, abs_tol=1e-9):
            raise ValueError("total must equal l_c + l_pce")

    @staticmethod
    def create(l_pce: float, l_c: float, labeled_count: int) -> "LossReport":
        return LossReport(float(l_pce), float(l_c), float(l_pce) + float(l_c),
                          int(labeled_count))
