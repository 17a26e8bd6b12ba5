"""Shared domain types, circle rasterization, and annotation file I/O."""
from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Optional

import numpy as np

# Tri-state supervision labels. BG=0 / FG=1 so labels double as CE targets.
FG = 1
BG = 0
UNLABELED = -1

# 8-bit file encoding (supervision exports and scribble masks).
U8_FG = 255
U8_BG = 0
U8_UNLABELED = 128

# Smallest hint radius: a degenerate estimate must still supervise the
# annotated pixel's 4-neighborhood.
R_MIN = 1.0

MIN_SIDE = 16

Point = tuple[int, int]  # (x = column, y = row), origin top-left


@dataclass(frozen=True)
class Scene:
    """One image plus (optionally) its ground-truth mask."""

    image: np.ndarray  # (3, H, W) float32 in [0, 1]
    mask: Optional[np.ndarray]  # (H, W) bool, None for unlabeled inference
    id: str

    def __post_init__(self) -> None:
        if self.image.ndim != 3 or self.image.shape[0] != 3:
            raise ValueError("Scene.image must have shape (3, H, W)")
        h, w = self.image.shape[1:]
        if h < MIN_SIDE or w < MIN_SIDE:
            raise ValueError(f"Scene smaller than {MIN_SIDE}x{MIN_SIDE}: {h}x{w}")
        if float(self.image.min()) < 0.0 or float(self.image.max()) > 1.0:
            raise ValueError("Scene.image values must lie in [0, 1]")
        if self.mask is not None:
            if self.mask.shape != (h, w):
                raise ValueError("Scene.mask shape must match image H x W")
            object.__setattr__(self, "mask", self.mask.astype(bool))

    @property
    def shape(self) -> tuple[int, int]:
        return self.image.shape[1], self.image.shape[2]


@dataclass(frozen=True)
class PointAnnotation:
    """The entire label for one image: one point per object plus one
    background point (multi-point ablations use k points per object)."""

    foreground_points: tuple[Point, ...]
    background_point: Point
    n_objects: int

    def __post_init__(self) -> None:
        fg = tuple((int(x), int(y)) for x, y in self.foreground_points)
        object.__setattr__(self, "foreground_points", fg)
        object.__setattr__(self, "background_point",
                           (int(self.background_point[0]), int(self.background_point[1])))
        if self.n_objects < 1:
            raise ValueError("n_objects must be >= 1")
        if len(fg) < 1 or len(fg) % self.n_objects != 0:
            raise ValueError("foreground point count must be a positive multiple of n_objects")
        if self.points_per_object not in (1, 2, 3):
            raise ValueError("points_per_object must be 1, 2 or 3")
        if self.background_point in fg:
            raise ValueError("background point coincides with a foreground point")

    @property
    def points_per_object(self) -> int:
        return len(self.foreground_points) // self.n_objects

    def validate_bounds(self, shape: tuple[int, int]) -> None:
        h, w = shape
        for x, y in (*self.foreground_points, self.background_point):
            if not (0 <= x < w and 0 <= y < h):
                raise ValueError(f"point ({x},{y}) outside {h}x{w} image")

    def warn_if_background_near(self, object_mask: np.ndarray, min_dist: float) -> None:
        # The source of background points is unconstrained; closeness to an
        # object is suspicious but not forbidden.
        xb, yb = self.background_point
        ys, xs = np.nonzero(object_mask)
        if len(ys) == 0:
            return
        d = np.sqrt((xs - xb) ** 2 + (ys - yb) ** 2).min()
        if d < min_dist:
            warnings.warn(
                f"background point ({xb},{yb}) is only {d:.1f}px from an object",
                stacklevel=2,
            )


@dataclass(frozen=True)
class SupervisionMask:
    """Per-pixel tri-state labels: FG / BG / UNLABELED."""

    labels: np.ndarray  # (H, W) int8

    def __post_init__(self) -> None:
        if self.labels.ndim != 2:
            raise ValueError("SupervisionMask.labels must be 2D")
        object.__setattr__(self, "labels", self.labels.astype(np.int8))

    @property
    def shape(self) -> tuple[int, int]:
        return self.labels.shape

    def fg(self) -> np.ndarray:
        return self.labels == FG

    def bg(self) -> np.ndarray:
        return self.labels == BG

    def labeled(self) -> np.ndarray:
        return self.labels != UNLABELED

    def to_u8(self) -> np.ndarray:
        out = np.full(self.labels.shape, U8_UNLABELED, dtype=np.uint8)
        out[self.labels == FG] = U8_FG
        out[self.labels == BG] = U8_BG
        return out

    @staticmethod
    def from_u8(img: np.ndarray) -> "SupervisionMask":
        labels = np.full(img.shape, UNLABELED, dtype=np.int8)
        labels[img == U8_FG] = FG
        labels[img == U8_BG] = BG
        return SupervisionMask(labels)

    @staticmethod
    def empty(shape: tuple[int, int]) -> "SupervisionMask":
        return SupervisionMask(np.full(shape, UNLABELED, dtype=np.int8))


@dataclass(frozen=True)
class PredictionMap:
    """Per-pixel foreground probability."""

    probs: np.ndarray  # (H, W) float in [0, 1]

    def __post_init__(self) -> None:
        if self.probs.ndim != 2:
            raise ValueError("PredictionMap.probs must be 2D")
        if float(self.probs.min()) < 0.0 or float(self.probs.max()) > 1.0:
            raise ValueError("PredictionMap values must lie in [0, 1]")

    @property
    def shape(self) -> tuple[int, int]:
        return self.probs.shape


@dataclass(frozen=True)
class CircleRegion:
    """A hint region: circle of radius >= R_MIN around an annotated point."""

    center: tuple[float, float]  # (x, y)
    radius: float

    def __post_init__(self) -> None:
        if self.radius < R_MIN:
            raise ValueError(f"CircleRegion radius must be >= {R_MIN}")


def rasterize_circle(center: tuple[float, float], radius: float,
                     shape: tuple[int, int]) -> np.ndarray:
    """Boolean mask of pixels whose center lies within `radius` of `center`.

    Membership is center-of-pixel distance <= radius, which makes the pixel
    set monotone in the radius. The result is clipped to the image bounds.
    """
    h, w = shape
    x, y = float(center[0]), float(center[1])
    if radius < 0:
        raise ValueError("radius must be >= 0")
    if not (0 <= x <= w - 1 and 0 <= y <= h - 1):
        raise ValueError(f"circle center ({x},{y}) outside {h}x{w} image")
    out = np.zeros((h, w), dtype=bool)
    r0 = max(0, int(np.floor(y - radius)))
    r1 = min(h - 1, int(np.ceil(y + radius)))
    c0 = max(0, int(np.floor(x - radius)))
    c1 = min(w - 1, int(np.ceil(x + radius)))
    rows = np.arange(r0, r1 + 1)
    cols = np.arange(c0, c1 + 1)
    dy2 = (rows - y) ** 2
    dx2 = (cols - x) ** 2
    out[r0:r1 + 1, c0:c1 + 1] = dy2[:, None] + dx2[None, :] <= radius ** 2
    return out


def validate_supervision(sup: SupervisionMask) -> Optional[str]:
    """Return None if the mask satisfies its invariants, else the first
    violation as a short report string."""
    vals = np.unique(sup.labels)
    bad = [int(v) for v in vals if int(v) not in (FG, BG, UNLABELED)]
    if bad:
        return f"invalid label value {bad[0]}"
    if not sup.fg().any():
        return "no FG"
    if not sup.bg().any():
        return "no BG"
    return None


def write_points_file(path, annotations: dict[str, PointAnnotation]) -> None:
    """One line per image: image_id, n, x1, y1, ..., xn, yn, xb, yb."""
    with open(path, "w") as fh:
        for image_id in sorted(annotations):
            ann = annotations[image_id]
            fields = [image_id, str(len(ann.foreground_points))]
            for x, y in ann.foreground_points:
                fields += [str(x), str(y)]
            fields += [str(ann.background_point[0]), str(ann.background_point[1])]
            fh.write(",".join(fields) + "\n")


def read_points_file(path, points_per_object: int = 1) -> dict[str, PointAnnotation]:
    out: dict[str, PointAnnotation] = {}
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            fields = line.split(",")
            image_id = fields[0].strip()
            n = int(fields[1])
            if len(fields) != 2 + 2 * n + 2:
                raise ValueError(f"{path}:{lineno}: expected {2 + 2 * n + 2} fields, got {len(fields)}")
            coords = [int(v) for v in fields[2:]]
            fg = tuple((coords[2 * i], coords[2 * i + 1]) for i in range(n))
            bg = (coords[2 * n], coords[2 * n + 1])
            if n % points_per_object != 0:
                raise ValueError(f"{path}:{lineno}: {n} points not divisible by points_per_object")
            out[image_id] = PointAnnotation(fg, bg, n_objects=n // points_per_object)
    return out
