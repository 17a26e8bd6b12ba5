"""Siamese augmentation branch machinery.

Two independently drawn transform lists produce the image pair; geometric
components are tracked as affine maps so one branch's prediction can be
re-expressed in the other branch's frame before the stop-gradient L1 loss.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import torch
import torch.nn.functional as F

from .core import UNLABELED, SupervisionMask
from .regulator import RegulatorConfig, build_mask, apply_mask

GEOMETRIC_KINDS = ("scale", "crop", "flip", "translate")
PHOTOMETRIC_KINDS = ("gaussian_blur", "color_jitter")
ALL_KINDS = GEOMETRIC_KINDS + ("regulator_mask",) + PHOTOMETRIC_KINDS

# canonical application order: regulator on the raw image, then geometry,
# then photometric ops
_ORDER = ("regulator_mask",) + GEOMETRIC_KINDS + PHOTOMETRIC_KINDS

SCALE_RANGE = (0.75, 1.25)
TRANSLATE_MAX_FRAC = 0.10
CROP_MIN_AREA = 0.75
BLUR_SIGMA_RANGE = (0.1, 2.0)
JITTER_RANGE = (0.8, 1.2)

_GRAY_WEIGHTS = (0.2989, 0.587, 0.114)


@dataclass(frozen=True)
class TransformSpec:
    kind: str
    params: dict = field(default_factory=dict)
    geometric: bool = False

    def __post_init__(self) -> None:
        if self.kind not in ALL_KINDS:
            raise ValueError(f"unknown transform kind {self.kind!r}")
        object.__setattr__(self, "geometric", self.kind in GEOMETRIC_KINDS)


@dataclass(frozen=True)
class AugPair:
    t1: tuple[TransformSpec, ...]
    t2: tuple[TransformSpec, ...]
    seed: int = 0

    def __post_init__(self) -> None:
        n_reg = sum(1 for s in (*self.t1, *self.t2) if s.kind == "regulator_mask")
        if n_reg > 1:
            raise ValueError("regulator_mask may appear in at most one branch")

    @property
    def any_geometric(self) -> bool:
        return any(s.geometric for s in (*self.t1, *self.t2))


def sample_pair(aug_set: Sequence[str], rng: np.random.Generator,
                regulator: Optional[RegulatorConfig] = None) -> AugPair:
    """Independent draws per branch; every enabled kind fires with prob 0.5,
    except regulator_mask which always rides branch 1 (the gradient-carrying
    predictor branch): the masked branch must restore the unmasked target,
    never the other way round."""
    for kind in aug_set:
        if kind not in ALL_KINDS:
            raise ValueError(f"unknown augmentation kind {kind!r}")
    branches: list[list[TransformSpec]] = [[], []]
    reg_branch = 0 if "regulator_mask" in aug_set else -1
    for kind in _ORDER:
        if kind not in aug_set:
            continue
        for b in range(2):
            if kind == "regulator_mask":
                if b != reg_branch:
                    continue
                ratio = regulator.mask_ratio if regulator is not None else 0.5
                spec = TransformSpec(kind, {"ratio": ratio,
                                            "seed": int(rng.integers(2 ** 31))})
            else:
                if rng.random() >= 0.5:
                    continue
                spec = _draw_params(kind, rng)
            branches[b].append(spec)
    return AugPair(tuple(branches[0]), tuple(branches[1]))


def _draw_params(kind: str, rng: np.random.Generator) -> TransformSpec:
    if kind == "scale":
        return TransformSpec(kind, {"s": float(rng.uniform(*SCALE_RANGE))})
    if kind == "crop":
        area = float(rng.uniform(CROP_MIN_AREA, 1.0))
        return TransformSpec(kind, {"frac": float(np.sqrt(area)),
                                    "ox": float(rng.random()), "oy": float(rng.random())})
    if kind == "flip":
        return TransformSpec(kind)
    if kind == "translate":
        return TransformSpec(kind, {"fx": float(rng.uniform(-TRANSLATE_MAX_FRAC, TRANSLATE_MAX_FRAC)),
                                    "fy": float(rng.uniform(-TRANSLATE_MAX_FRAC, TRANSLATE_MAX_FRAC))})
    if kind == "gaussian_blur":
        return TransformSpec(kind, {"sigma": float(rng.uniform(*BLUR_SIGMA_RANGE))})
    if kind == "color_jitter":
        return TransformSpec(kind, {"brightness": float(rng.uniform(*JITTER_RANGE)),
                                    "contrast": float(rng.uniform(*JITTER_RANGE)),
                                    "saturation": float(rng.uniform(*JITTER_RANGE))})
    raise ValueError(kind)


def spec_matrix(spec: TransformSpec, shape: tuple[int, int]) -> np.ndarray:
    """3x3 affine mapping output pixel coords -> input pixel coords."""
    h, w = shape
    m = np.eye(3, dtype=np.float64)
    p = spec.params
    if spec.kind == "flip":
        m[0, 0], m[0, 2] = -1.0, w - 1.0
    elif spec.kind == "translate":
        m[0, 2] = -p["fx"] * w
        m[1, 2] = -p["fy"] * h
    elif spec.kind == "scale":
        s = p["s"]
        cx, cy = (w - 1) / 2.0, (h - 1) / 2.0
        m[0, 0] = m[1, 1] = 1.0 / s
        m[0, 2] = cx * (1.0 - 1.0 / s)
        m[1, 2] = cy * (1.0 - 1.0 / s)
    elif spec.kind == "crop":
        cw, ch = p["frac"] * w, p["frac"] * h
        x0 = p["ox"] * (w - cw)
        y0 = p["oy"] * (h - ch)
        m[0, 0] = cw / w
        m[1, 1] = ch / h
        m[0, 2] = x0 + 0.5 * cw / w - 0.5
        m[1, 2] = y0 + 0.5 * ch / h - 0.5
    else:
        raise ValueError(f"{spec.kind} has no geometric matrix")
    return m


def compose_matrix(specs: Sequence[TransformSpec], shape: tuple[int, int]) -> np.ndarray:
    """Inverse-coordinate matrix of the composite of the geometric specs,
    in application order (first applied leftmost)."""
    m = np.eye(3, dtype=np.float64)
    for spec in specs:
        if spec.geometric:
            m = m @ spec_matrix(spec, shape)
    return m


def _grid_from_matrix(m: np.ndarray, shape: tuple[int, int],
                      dtype: torch.dtype) -> torch.Tensor:
    h, w = shape
    xs = np.arange(w, dtype=np.float64)
    ys = np.arange(h, dtype=np.float64)
    gx = m[0, 0] * xs[None, :] + m[0, 1] * ys[:, None] + m[0, 2]
    gy = m[1, 0] * xs[None, :] + m[1, 1] * ys[:, None] + m[1, 2]
    # align_corners=False normalization
    nx = (2.0 * gx + 1.0) / w - 1.0
    ny = (2.0 * gy + 1.0) / h - 1.0
    grid = np.stack([nx, ny], axis=-1)
    return torch.from_numpy(grid).to(dtype)


def _warp(x: torch.Tensor, m: np.ndarray, mode: str = "bilinear") -> torch.Tensor:
    """Warp (C, H, W) by the inverse-coordinate matrix m."""
    h, w = x.shape[-2:]
    grid = _grid_from_matrix(m, (h, w), x.dtype if x.is_floating_point() else torch.float32)
    xb = x.unsqueeze(0).float() if not x.is_floating_point() else x.unsqueeze(0)
    out = F.grid_sample(xb, grid.unsqueeze(0), mode=mode,
                        padding_mode="zeros", align_corners=False)
    return out.squeeze(0).to(x.dtype) if not x.is_floating_point() else out.squeeze(0)


def _blur(x: torch.Tensor, sigma: float) -> torch.Tensor:
    k = max(3, 2 * int(np.ceil(2.5 * sigma)) + 1)
    half = k // 2
    t = torch.arange(k, dtype=x.dtype) - half
    kernel = torch.exp(-t ** 2 / (2 * sigma ** 2))
    kernel = kernel / kernel.sum()
    c = x.shape[0]
    pad = (half, half, half, half)
    xp = F.pad(x.unsqueeze(0), pad, mode="reflect")
    xp = F.conv2d(xp, kernel.view(1, 1, 1, k).expand(c, 1, 1, k), groups=c)
    xp = F.conv2d(xp, kernel.view(1, 1, k, 1).expand(c, 1, k, 1), groups=c)
    return xp.squeeze(0)


def _jitter(x: torch.Tensor, brightness: float, contrast: float,
            saturation: float) -> torch.Tensor:
    x = (x * brightness).clamp(0, 1)
    wr, wg, wb = _GRAY_WEIGHTS
    gray = wr * x[0] + wg * x[1] + wb * x[2]
    x = ((x - gray.mean()) * contrast + gray.mean()).clamp(0, 1)
    x = (x * saturation + gray.unsqueeze(0) * (1 - saturation)).clamp(0, 1)
    return x


def apply_transform(image: torch.Tensor, specs: Sequence[TransformSpec],
                    sup: Optional[SupervisionMask] = None) -> torch.Tensor:
    """Apply specs to a (3, H, W) image tensor in list order."""
    x = image
    for spec in specs:
        if spec.geometric:
            x = _warp(x, spec_matrix(spec, x.shape[-2:]))
        elif spec.kind == "gaussian_blur":
            x = _blur(x, spec.params["sigma"])
        elif spec.kind == "color_jitter":
            x = _jitter(x, spec.params["brightness"], spec.params["contrast"],
                        spec.params["saturation"])
        elif spec.kind == "regulator_mask":
            if sup is None:
                raise ValueError("regulator_mask requires the supervision mask")
            cfg = RegulatorConfig(mask_ratio=spec.params["ratio"])
            rng = np.random.default_rng(int(spec.params["seed"]))
            x = apply_mask(x, build_mask(sup, cfg, rng))
        else:
            raise ValueError(spec.kind)
    return x


def transform_supervision(sup: SupervisionMask,
                          specs: Sequence[TransformSpec]) -> SupervisionMask:
    """Move supervision with its branch's geometric specs (nearest neighbor);
    pixels pulled from outside the frame become UNLABELED."""
    geo = [s for s in specs if s.geometric]
    if not geo:
        return sup
    m = compose_matrix(geo, sup.shape)
    planes = torch.stack([
        torch.from_numpy(sup.labels.astype(np.float32)),
        torch.ones(sup.shape, dtype=torch.float32),
    ])
    out = _warp(planes, m, mode="nearest")
    labels = out[0].numpy().round().astype(np.int8)
    labels[out[1].numpy() < 0.5] = UNLABELED
    return SupervisionMask(labels)


def alignment_matrix(from_specs: Sequence[TransformSpec],
                     to_specs: Sequence[TransformSpec],
                     shape: tuple[int, int]) -> np.ndarray:
    m_from = compose_matrix(from_specs, shape)
    m_to = compose_matrix(to_specs, shape)
    return np.linalg.inv(m_from) @ m_to


def align_prediction(pred: torch.Tensor, from_specs: Sequence[TransformSpec],
                     to_specs: Sequence[TransformSpec]) -> torch.Tensor:
    """Re-express a prediction made in `from_specs`'s frame in `to_specs`'s
    frame: apply to_specs' geometry and the inverse of from_specs' geometry.
    Photometric specs do not move pixels and are ignored.

    Accepts (H, W) or (B, 1, H, W) tensors.
    """
    squeeze = pred.dim() == 2
    x = pred.view(1, 1, *pred.shape) if squeeze else pred
    m = alignment_matrix(from_specs, to_specs, x.shape[-2:])
    grid = _grid_from_matrix(m, x.shape[-2:], x.dtype)
    out = F.grid_sample(x, grid.unsqueeze(0).expand(x.shape[0], -1, -1, -1),
                        mode="bilinear", padding_mode="zeros", align_corners=False)
    return out.view(pred.shape) if squeeze else out


def border_mask(shape: tuple[int, int], band: int,
                dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Ones with a `band`-pixel frame of zeros (resampling exclusion zone)."""
    m = torch.zeros(shape, dtype=dtype)
    if band * 2 < min(shape):
        m[band:shape[0] - band, band:shape[1] - band] = 1.0
    else:
        m[:] = 1.0
    return m


def pair_valid_mask(pair: AugPair, shape: tuple[int, int], band: int) -> torch.Tensor:
    """Pixels of branch-1's frame where the contrastive distance is
    meaningful: both branches must have observed real content there (geometry
    pads with zeros out of view), minus the resampling border band."""
    if not pair.any_geometric:
        return torch.ones(shape, dtype=torch.float32)
    ones = torch.ones(shape, dtype=torch.float32)
    cov1 = _warp(ones.unsqueeze(0), compose_matrix(pair.t1, shape))[0]
    cov2 = _warp(ones.unsqueeze(0), compose_matrix(pair.t2, shape))[0]
    cov2_in_1 = align_prediction(cov2, pair.t2, pair.t1)
    valid = ((cov1 > 0.999) & (cov2_in_1 > 0.999)).to(torch.float32)
    return valid * border_mask(shape, band)


def contrastive_loss(p1: torch.Tensor, p2: torch.Tensor, kind: str = "l1",
                     stopgrad: bool = True, normalize: str = "mean",
                     valid: Optional[torch.Tensor] = None,
                     symmetrize: bool = False, eps: float = 1e-7) -> torch.Tensor:
    """Distance between the predictor branch p1 and the target branch p2,
    with the gradient stopped on the p2 side."""
    if p1.shape != p2.shape:
        raise ValueError(f"shape mismatch: {tuple(p1.shape)} vs {tuple(p2.shape)}")
    vm = None
    if valid is not None:
        if valid.shape not in (p1.shape, p1.shape[-2:]):
            raise ValueError("valid mask must match the prediction shape")
        vm = valid.to(p1.dtype).expand(p1.shape)

    def one_sided(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        if stopgrad:
            b = b.detach()
        if kind == "l1":
            d = (a - b).abs()
        elif kind == "mse":
            d = (a - b) ** 2
        elif kind == "kl":
            ac = a.clamp(eps, 1 - eps)
            bc = b.clamp(eps, 1 - eps)
            d = bc * (bc / ac).log() + (1 - bc) * ((1 - bc) / (1 - ac)).log()
        elif kind == "cos":
            am = a if vm is None else a * vm
            bm = b if vm is None else b * vm
            av = am.reshape(am.shape[0], -1) if am.dim() > 2 else am.reshape(1, -1)
            bv = bm.reshape(bm.shape[0], -1) if bm.dim() > 2 else bm.reshape(1, -1)
            return (1 - F.cosine_similarity(av, bv, dim=1, eps=eps)).mean()
        else:
            raise ValueError(f"unknown contrastive loss {kind!r}")
        if vm is not None:
            total = (d * vm).sum()
            return total / vm.sum().clamp_min(1.0) if normalize == "mean" else total
        return d.mean() if normalize == "mean" else d.sum()

    loss = one_sided(p1, p2)
    if symmetrize:
        loss = 0.5 * (loss + one_sided(p2, p1))
    return loss
