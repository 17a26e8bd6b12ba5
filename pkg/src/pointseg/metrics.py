"""Evaluation metrics: MAE, S-measure, adaptive E-measure, weighted F-measure.

Behavior is pinned by the brute-force oracle fixtures in the test suite, not
by any external implementation. Degenerate ground truths follow the
conventions noted on each function.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np
from scipy import ndimage

E_MEASURE_VARIANT = "adaptive"  # mean-thresholded binary prediction

_WFB_SIGMA = 5.0
_WFB_KSIZE = 7
_WFB_THETA = np.log(0.5) / 5.0
_WFB_BETA2 = 1.0


def _check(pred: np.ndarray, gt: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    pred = np.asarray(pred, dtype=np.float64)
    if pred.shape != gt.shape:
        raise ValueError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    return pred, np.asarray(gt).astype(bool)


def mae(pred: np.ndarray, gt: np.ndarray) -> float:
    pred, gt = _check(pred, gt)
    return float(np.abs(pred - gt.astype(np.float64)).mean())


def _s_object(pred: np.ndarray, gt: np.ndarray) -> float:
    def score(vals: np.ndarray) -> float:
        x = float(vals.mean())
        sigma = float(vals.std())
        return 2.0 * x / (x * x + 1.0 + sigma + 1e-20)

    u = float(gt.mean())
    o_fg = score(pred[gt])
    o_bg = score(1.0 - pred[~gt])
    return u * o_fg + (1.0 - u) * o_bg


def _ssim_region(pred: np.ndarray, gt: np.ndarray) -> float:
    n = pred.size
    x, y = float(pred.mean()), float(gt.mean())
    sx = float(((pred - x) ** 2).sum()) / (n - 1 + 1e-20)
    sy = float(((gt - y) ** 2).sum()) / (n - 1 + 1e-20)
    sxy = float(((pred - x) * (gt - y)).sum()) / (n - 1 + 1e-20)
    alpha = 4.0 * x * y * sxy
    beta = (x * x + y * y) * (sx + sy)
    if alpha != 0.0:
        return alpha / (beta + 1e-20)
    return 1.0 if beta == 0.0 else 0.0


def _s_region(pred: np.ndarray, gt: np.ndarray) -> float:
    h, w = gt.shape
    ys, xs = np.nonzero(gt)
    cy = int(round(float(ys.mean())))
    cx = int(round(float(xs.mean())))
    area = h * w
    gtf = gt.astype(np.float64)
    score = 0.0
    for (rs, cs) in (((0, cy), (0, cx)), ((0, cy), (cx, w)),
                     ((cy, h), (0, cx)), ((cy, h), (cx, w))):
        g = gtf[rs[0]:rs[1], cs[0]:cs[1]]
        p = pred[rs[0]:rs[1], cs[0]:cs[1]]
        if g.size == 0:
            continue
        score += (g.size / area) * _ssim_region(p, g)
    return score


def s_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """0.5 * object similarity + 0.5 * 4-quadrant region SSIM.
    Degenerate gt: all-background -> 1 - mean(pred); all-foreground -> mean(pred)."""
    pred, gt = _check(pred, gt)
    u = float(gt.mean())
    if u == 0.0:
        return 1.0 - float(pred.mean())
    if u == 1.0:
        return float(pred.mean())
    score = 0.5 * _s_object(pred, gt) + 0.5 * _s_region(pred, gt)
    return max(0.0, score)


def e_measure(pred: np.ndarray, gt: np.ndarray) -> float:
    """Adaptive variant: the prediction is binarized at its own mean, the
    enhanced alignment term is averaged over all pixels. Degenerate gt:
    all-background -> mean(1 - binary pred); all-foreground -> mean(binary pred)."""
    pred, gt = _check(pred, gt)
    binary = (pred > pred.mean()).astype(np.float64)
    gtf = gt.astype(np.float64)
    u = float(gtf.mean())
    if u == 0.0:
        return float((1.0 - binary).mean())
    if u == 1.0:
        return float(binary.mean())
    xi_gt = gtf - u
    xi_pred = binary - binary.mean()
    align = 2.0 * xi_gt * xi_pred / (xi_gt ** 2 + xi_pred ** 2)
    enhanced = (align + 1.0) ** 2 / 4.0
    return float(enhanced.mean())


def _wfb_kernel() -> np.ndarray:
    half = _WFB_KSIZE // 2
    ax = np.arange(-half, half + 1, dtype=np.float64)
    k = np.exp(-(ax[:, None] ** 2 + ax[None, :] ** 2) / (2 * _WFB_SIGMA ** 2))
    return k / k.sum()


def weighted_f_beta(pred: np.ndarray, gt: np.ndarray) -> float:
    """Boundary-aware precision/recall with beta^2 = 1: errors at background
    pixels borrow the error of the nearest foreground pixel, get smoothed by
    a 7x7 sigma-5 Gaussian, and are weighted by 2 - exp(ln(0.5)/5 * dist).
    Degenerate all-background gt: 1 if mean(pred) < 0.01 else 0."""
    pred, gt = _check(pred, gt)
    if not gt.any():
        return 1.0 if float(pred.mean()) < 0.01 else 0.0
    gtf = gt.astype(np.float64)
    e = np.abs(pred - gtf)
    et = e.copy()
    if (~gt).any():
        dist, (iy, ix) = ndimage.distance_transform_edt(~gt, return_indices=True)
        bg = ~gt
        et[bg] = e[iy[bg], ix[bg]]
    ea = ndimage.correlate(et, _wfb_kernel(), mode="constant", cval=0.0)
    min_e_ea = e.copy()
    take = gt & (ea < e)
    min_e_ea[take] = ea[take]
    b = np.ones_like(e)
    if (~gt).any():
        b[~gt] = 2.0 - np.exp(_WFB_THETA * dist[~gt])
    ew = min_e_ea * b
    tpw = float(gtf.sum() - ew[gt].sum())
    fpw = float(ew[~gt].sum())
    recall = 1.0 - float(ew[gt].mean())
    precision = tpw / (tpw + fpw) if (tpw + fpw) > 0 else 0.0
    denom = _WFB_BETA2 * precision + recall
    if denom <= 0:
        return 0.0
    q = (1 + _WFB_BETA2) * precision * recall / denom
    return float(min(max(q, 0.0), 1.0))


def compute_all(pred: np.ndarray, gt: np.ndarray) -> dict[str, float]:
    return {
        "mae": mae(pred, gt),
        "s_measure": s_measure(pred, gt),
        "e_measure": e_measure(pred, gt),
        "f_w_beta": weighted_f_beta(pred, gt),
    }


@dataclass
class MetricReport:
    per_image: dict[str, dict[str, float]]
    mae: float = 0.0
    s_measure: float = 0.0
    e_measure: float = 0.0
    f_w_beta: float = 0.0
    e_measure_variant: str = E_MEASURE_VARIANT

    def __post_init__(self) -> None:
        if self.per_image:
            for key in ("mae", "s_measure", "e_measure", "f_w_beta"):
                setattr(self, key,
                        float(np.mean([m[key] for m in self.per_image.values()])))

    def as_dict(self) -> dict:
        return {
            "mae": self.mae,
            "s_measure": self.s_measure,
            "e_measure": self.e_measure,
            "f_w_beta": self.f_w_beta,
            "e_measure_variant": self.e_measure_variant,
            "n_images": len(self.per_image),
        }


def evaluate_pairs(pairs: Iterable[tuple[str, np.ndarray, np.ndarray]]) -> MetricReport:
    per_image = {image_id: compute_all(pred, gt) for image_id, pred, gt in pairs}
    if not per_image:
        raise ValueError("no (pred, gt) pairs to evaluate")
    return MetricReport(per_image=per_image)


def write_metric_files(report: MetricReport, csv_path, json_path) -> None:
    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["image_id", "mae", "sm", "em", "fwb"])
        for image_id in sorted(report.per_image):
            m = report.per_image[image_id]
            writer.writerow([image_id, repr(m["mae"]), repr(m["s_measure"]),
                             repr(m["e_measure"]), repr(m["f_w_beta"])])
    Path(json_path).write_text(json.dumps(report.as_dict(), indent=2, sort_keys=True))
