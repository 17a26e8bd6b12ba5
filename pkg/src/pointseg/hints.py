"""Hint area generator: initial square labels, warm-up radius estimation,
and expansion of point annotations into circular hint regions."""
from __future__ import annotations

from dataclasses import dataclass
from typing import NamedTuple, Union

import numpy as np

from .core import (BG, FG, R_MIN, UNLABELED, PointAnnotation, PredictionMap,
                   SupervisionMask, rasterize_circle)
from .model import ModelState, SegmentationNet, predict_map


@dataclass(frozen=True)
class HintConfig:
    d: int = 10             # initial square side, pixels
    tau: float = 150.0      # threshold on the prediction map, 8-bit scale
    alpha: float = 4.0      # radius divisor
    w: int = 15             # warm-up epochs
    threshold_mode: str = "fixed"  # fixed | cluster2
    tau_scale: float = 255.0  # predictions live in [0,1]; compare P > tau/tau_scale

    def __post_init__(self) -> None:
        if self.d < 1:
            raise ValueError("d must be >= 1")
        if not (0 < self.tau < self.tau_scale):
            raise ValueError("tau must lie strictly between 0 and tau_scale")
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.w < 1:
            raise ValueError("w must be >= 1")
        if self.threshold_mode not in ("fixed", "cluster2"):
            raise ValueError(f"unknown threshold_mode {self.threshold_mode!r}")


def _square_mask(point: tuple[int, int], d: int, shape: tuple[int, int]) -> np.ndarray:
    """Axis-aligned side-d square around the point, clipped to bounds.
    For even d the extra row/column goes to the low side."""
    h, w = shape
    x, y = point
    x0, y0 = x - d // 2, y - d // 2
    mask = np.zeros((h, w), dtype=bool)
    mask[max(0, y0):min(h, y0 + d), max(0, x0):min(w, x0 + d)] = True
    return mask


def initial_square_supervision(ann: PointAnnotation, d: int,
                               shape: tuple[int, int]) -> SupervisionMask:
    """FG squares at every foreground point, one BG square at the background
    point. A BG square that would touch foreground shrinks (never relabels
    FG pixels: those are the human-given labels)."""
    ann.validate_bounds(shape)
    fg = np.zeros(shape, dtype=bool)
    for p in ann.foreground_points:
        fg |= _square_mask(p, d, shape)
    bg = None
    for side in range(d, 0, -1):
        cand = _square_mask(ann.background_point, side, shape)
        if not (cand & fg).any():
            bg = cand
            break
    if bg is None:
        cand = _square_mask(ann.background_point, 1, shape)
        bg = cand & ~fg
        if not bg.any():
            raise ValueError("background point lies inside foreground supervision")
    labels = np.full(shape, UNLABELED, dtype=np.int8)
    labels[bg] = BG
    labels[fg] = FG
    return SupervisionMask(labels)


class RadiusEstimate(NamedTuple):
    r: float
    fallback: bool
    threshold: float


def cluster2_threshold(values: np.ndarray) -> float:
    """Midpoint between the two centers of a 1-D 2-means clustering
    (deterministic Lloyd iteration initialized at min/max)."""
    v = values.ravel().astype(np.float64)
    lo, hi = float(v.min()), float(v.max())
    if hi - lo < 1e-12:
        return hi  # nothing above a degenerate split
    c1, c2 = lo, hi
    for _ in range(100):
        mid = (c1 + c2) / 2.0
        low, high = v[v <= mid], v[v > mid]
        if len(low) == 0 or len(high) == 0:
            break
        n1, n2 = float(low.mean()), float(high.mean())
        if abs(n1 - c1) < 1e-12 and abs(n2 - c2) < 1e-12:
            break
        c1, c2 = n1, n2
    return (c1 + c2) / 2.0


def estimate_radius(pred: PredictionMap, tau: float, n_objects: int,
                    threshold_mode: str = "fixed",
                    tau_scale: float = 255.0) -> RadiusEstimate:
    """r = sqrt(count(P > threshold) / N). A zero count signals FALLBACK:
    the caller keeps the square supervision instead of inventing a radius."""
    if n_objects < 1:
        raise ValueError("n_objects must be >= 1")
    if threshold_mode == "cluster2":
        threshold = cluster2_threshold(pred.probs)
    else:
        threshold = tau / tau_scale
    count = int((pred.probs > threshold).sum())
    if count == 0:
        return RadiusEstimate(0.0, True, threshold)
    return RadiusEstimate(float(np.sqrt(count / n_objects)), False, threshold)


def expand_points(ann: PointAnnotation, r: float, alpha: float,
                  shape: tuple[int, int]) -> SupervisionMask:
    """Union of FG circles of radius R = max(r/alpha, R_MIN) at every
    foreground point plus one BG circle at the background point. A BG circle
    that would overlap foreground shrinks toward R_MIN."""
    if r <= 0:
        raise ValueError("expand_points needs r > 0 (fallback handles r == 0)")
    ann.validate_bounds(shape)
    radius = max(r / alpha, R_MIN)
    fg = np.zeros(shape, dtype=bool)
    for p in ann.foreground_points:
        fg |= rasterize_circle(p, radius, shape)
    bg = None
    rb = radius
    while rb >= R_MIN:
        cand = rasterize_circle(ann.background_point, rb, shape)
        if not (cand & fg).any():
            bg = cand
            break
        rb = R_MIN if (rb > R_MIN and rb - 1.0 < R_MIN) else rb - 1.0
    if bg is None:
        cand = rasterize_circle(ann.background_point, R_MIN, shape) & ~fg
        if not cand.any():
            raise ValueError("background point lies inside foreground supervision")
        bg = cand
    labels = np.full(shape, UNLABELED, dtype=np.int8)
    labels[bg] = BG
    labels[fg] = FG
    return SupervisionMask(labels)


@dataclass(frozen=True)
class HintResult:
    supervision: SupervisionMask
    r: float
    radius: float  # R = max(r / alpha, R_MIN), 0.0 on fallback
    fallback: bool


def generate_hint_supervision(scene, ann: PointAnnotation,
                              model: Union[ModelState, SegmentationNet],
                              cfg: HintConfig) -> HintResult:
    """Warm-up prediction -> radius estimate -> circle expansion; on an empty
    indicator keep the initial square supervision unchanged."""
    net = model.net if isinstance(model, ModelState) else model
    pred = predict_map(net, scene.image)
    est = estimate_radius(pred, cfg.tau, ann.n_objects,
                          threshold_mode=cfg.threshold_mode, tau_scale=cfg.tau_scale)
    if est.fallback:
        sup = initial_square_supervision(ann, cfg.d, scene.shape)
        return HintResult(sup, 0.0, 0.0, True)
    sup = expand_points(ann, est.r, cfg.alpha, scene.shape)
    return HintResult(sup, est.r, max(est.r / cfg.alpha, R_MIN), False)
