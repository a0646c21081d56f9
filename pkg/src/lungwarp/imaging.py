"""Physical-grid raster primitives.

Arrays are stored row-major with shape ``(height, width)``; pixel ``(i, j)``
means column ``i`` (x) and row ``j`` (y), with physical position
``origin + spacing * (i, j)`` in millimetres.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

LANDMARK_LABELS = (
    "apex-left",
    "apex-right",
    "costophrenic-left",
    "costophrenic-right",
    "costocardiac-left",
    "costocardiac-right",
)

DEFAULT_PYRAMID_SIGMA = 1.0


@dataclass(frozen=True)
class Grid2D:
    width: int
    height: int
    spacing: float = 1.0
    origin: tuple[float, float] = (0.0, 0.0)

    def __post_init__(self):
        if self.width < 2 or self.height < 2:
            raise ValueError(f"grid must be at least 2x2, got {self.width}x{self.height}")
        if not self.spacing > 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")
        object.__setattr__(self, "width", int(self.width))
        object.__setattr__(self, "height", int(self.height))
        object.__setattr__(self, "spacing", float(self.spacing))
        object.__setattr__(self, "origin", (float(self.origin[0]), float(self.origin[1])))

    @property
    def shape(self) -> tuple[int, int]:
        return (self.height, self.width)

    @property
    def extent(self) -> tuple[float, float, float, float]:
        """(xmin, xmax, ymin, ymax) of pixel centres in mm."""
        ox, oy = self.origin
        return (ox, ox + (self.width - 1) * self.spacing,
                oy, oy + (self.height - 1) * self.spacing)

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """Physical x and y coordinate rasters, each of shape ``(height, width)``."""
        xs = self.origin[0] + self.spacing * np.arange(self.width)
        ys = self.origin[1] + self.spacing * np.arange(self.height)
        return np.meshgrid(xs, ys)

    def to_index(self, points: np.ndarray) -> np.ndarray:
        """Continuous (column, row) indices of physical points."""
        points = np.asarray(points, dtype=float)
        return (points - np.asarray(self.origin)) / self.spacing

    def contains(self, points: np.ndarray) -> np.ndarray:
        xmin, xmax, ymin, ymax = self.extent
        points = np.atleast_2d(points)
        return ((points[:, 0] >= xmin) & (points[:, 0] <= xmax)
                & (points[:, 1] >= ymin) & (points[:, 1] <= ymax))


@dataclass(frozen=True, eq=False)
class Image2D:
    grid: Grid2D
    values: np.ndarray

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64)
        if values.shape != self.grid.shape:
            raise ValueError(f"values shape {values.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(values)):
            raise ValueError("image contains non-finite values")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)

    @classmethod
    def from_array(cls, values, spacing: float = 1.0, origin=(0.0, 0.0)) -> "Image2D":
        values = np.asarray(values, dtype=np.float64)
        return cls(Grid2D(values.shape[1], values.shape[0], spacing, origin), values)

    def with_values(self, values) -> "Image2D":
        return Image2D(self.grid, values)


class MaskKind(str, Enum):
    FULL = "full"
    PARTIAL = "partial"
    LEFT_PARTIAL = "left-partial"
    RIGHT_PARTIAL = "right-partial"
    REGISTRATION_ROI = "registration-roi"


@dataclass(frozen=True, eq=False)
class BinaryMask:
    grid: Grid2D
    values: np.ndarray
    kind: MaskKind = MaskKind.FULL

    def __post_init__(self):
        values = np.asarray(self.values).astype(bool)
        if values.shape != self.grid.shape:
            raise ValueError(f"mask shape {values.shape} does not match grid {self.grid.shape}")
        values.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "kind", MaskKind(self.kind))

    @property
    def count(self) -> int:
        return int(self.values.sum())

    def require_nonempty(self, what: str = "mask") -> "BinaryMask":
        if self.count == 0:
            raise ValueError(f"{what} is empty")
        return self


@dataclass(frozen=True, eq=False)
class LandmarkSet:
    points: np.ndarray
    labels: tuple[str, ...] = field(default=LANDMARK_LABELS)

    def __post_init__(self):
        points = np.array(self.points, dtype=np.float64).reshape(-1, 2)
        labels = tuple(self.labels)
        if len(labels) != len(points):
            raise ValueError("one label per point required")
        if len(points) != 6 or sorted(labels) != sorted(LANDMARK_LABELS):
            raise ValueError(f"expected the six lung landmarks, got {labels}")
        if not np.all(np.isfinite(points)):
            raise ValueError("landmarks must be finite")
        points.setflags(write=False)
        object.__setattr__(self, "points", points)
        object.__setattr__(self, "labels", labels)

    def check_inside(self, grid: Grid2D) -> "LandmarkSet":
        if not np.all(grid.contains(self.points)):
            raise ValueError("landmark outside the image extent")
        return self

    def ordered(self, labels=LANDMARK_LABELS) -> np.ndarray:
        """Points re-ordered to ``labels``."""
        index = {lab: k for k, lab in enumerate(self.labels)}
        return self.points[[index[lab] for lab in labels]]

    def with_points(self, points) -> "LandmarkSet":
        return LandmarkSet(points, self.labels)


def pad_to_square(img: Image2D, target: int) -> Image2D:
    h, w = img.grid.shape
    if target < max(h, w):
        raise ValueError(f"target {target} smaller than image {w}x{h}")
    out = np.zeros((target, target))
    out[:h, :w] = img.values
    return Image2D(replace(img.grid, width=target, height=target), out)


def crop(img: Image2D, width: int, height: int) -> Image2D:
    """Inverse of :func:`pad_to_square` (keeps the top-left block)."""
    return Image2D(replace(img.grid, width=width, height=height),
                   img.values[:height, :width])


def shift_horizontal(img: Image2D, dx: int) -> Image2D:
    w = img.grid.width
    dx = int(dx)
    if abs(dx) >= w:
        raise ValueError(f"|dx|={abs(dx)} must be smaller than width {w}")
    out = np.zeros_like(img.values)
    if dx >= 0:
        out[:, dx:] = img.values[:, :w - dx]
    else:
        out[:, :w + dx] = img.values[:, -dx:]
    return img.with_values(out)


def gaussian_kernel(sigma: float) -> np.ndarray:
    """Normalised discrete Gaussian with radius ``ceil(3 sigma)``."""
    radius = math.ceil(3 * sigma)
    x = np.arange(-radius, radius + 1, dtype=float)
    k = np.exp(-0.5 * (x / sigma) ** 2)
    return k / k.sum()


def smooth_array(values: np.ndarray, sigma: float) -> np.ndarray:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return np.array(values, dtype=float)
    k = gaussian_kernel(sigma)
    out = ndimage.convolve1d(np.asarray(values, dtype=float), k, axis=0, mode="nearest")
    return ndimage.convolve1d(out, k, axis=1, mode="nearest")


def gaussian_smooth(img: Image2D, sigma: float) -> Image2D:
    if sigma < 0:
        raise ValueError("sigma must be non-negative")
    if sigma == 0:
        return img
    return img.with_values(smooth_array(img.values, sigma))


def coarse_grid(grid: Grid2D) -> Grid2D:
    if grid.width % 2 or grid.height % 2:
        raise ValueError(f"cannot halve odd grid {grid.width}x{grid.height}")
    return replace(grid, width=grid.width // 2, height=grid.height // 2,
                   spacing=grid.spacing * 2)


def downsample_by_2(img: Image2D, sigma: float = DEFAULT_PYRAMID_SIGMA) -> Image2D:
    grid = coarse_grid(img.grid)
    return Image2D(grid, smooth_array(img.values, sigma)[::2, ::2])


def downsample_mask(mask: BinaryMask) -> BinaryMask:
    return BinaryMask(coarse_grid(mask.grid), mask.values[::2, ::2], mask.kind)


def build_pyramid(img: Image2D, levels: int, sigma: float = DEFAULT_PYRAMID_SIGMA) -> list[Image2D]:
    """Coarse-to-fine list of images; the last entry is ``img`` itself."""
    if levels < 1:
        raise ValueError("levels must be >= 1")
    factor = 2 ** (levels - 1)
    if img.grid.width % factor or img.grid.height % factor:
        raise ValueError(f"image size not divisible by {factor}")
    out = [img]
    for _ in range(levels - 1):
        out.append(downsample_by_2(out[-1], sigma))
    return out[::-1]


def mask_pyramid(mask: BinaryMask, levels: int) -> list[BinaryMask]:
    out = [mask]
    for _ in range(levels - 1):
        out.append(downsample_mask(out[-1]))
    return out[::-1]


def bilinear_indices(values: np.ndarray, cols: np.ndarray, rows: np.ndarray,
                     clamp: bool = False) -> np.ndarray:
    """Bilinear lookup at continuous (column, row) indices.

    By default the raster is treated as embedded in zeros, so values fade to
    zero within one pixel outside the pixel-centre extent and are exactly
    zero beyond. ``clamp=True`` uses edge replication instead.
    """
    cols = np.asarray(cols, dtype=float)
    rows = np.asarray(rows, dtype=float)
    if not clamp:
        values = np.pad(values, 1)
        cols = cols + 1
        rows = rows + 1
    h, w = values.shape
    c = np.clip(cols, 0, w - 1)
    r = np.clip(rows, 0, h - 1)
    c0 = np.clip(np.floor(c).astype(int), 0, w - 2)
    r0 = np.clip(np.floor(r).astype(int), 0, h - 2)
    fc = c - c0
    fr = r - r0
    return (values[r0, c0] * (1 - fc) * (1 - fr) + values[r0, c0 + 1] * fc * (1 - fr)
            + values[r0 + 1, c0] * (1 - fc) * fr + values[r0 + 1, c0 + 1] * fc * fr)


def sample_bilinear(img: Image2D, p) -> np.ndarray | float:
    """Bilinear value at physical point(s) ``p`` (mm) with zero padding."""
    p = np.asarray(p, dtype=float)
    idx = img.grid.to_index(p)
    out = bilinear_indices(img.values, idx[..., 0], idx[..., 1])
    return float(out) if out.ndim == 0 else out


def resample_grid(grid: Grid2D, size: int) -> Grid2D:
    """Square ``size`` grid covering the same physical field of view (pixel edges aligned)."""
    if grid.width != grid.height:
        raise ValueError("resampling expects a square grid; pad first")
    spacing = grid.spacing * grid.width / size
    shift = 0.5 * (spacing - grid.spacing)
    return Grid2D(size, size, spacing, (grid.origin[0] + shift, grid.origin[1] + shift))


def resample_to(img: Image2D, size: int) -> Image2D:
    """Anti-aliased bilinear resampling of a square image to ``size`` x ``size``."""
    if size == img.grid.width and img.grid.width == img.grid.height:
        return img
    grid = resample_grid(img.grid, size)
    factor = img.grid.width / size
    values = smooth_array(img.values, 0.5 * factor) if factor > 1 else img.values
    xs, ys = grid.coordinates()
    idx = img.grid.to_index(np.stack([xs, ys], axis=-1))
    return Image2D(grid, bilinear_indices(values, idx[..., 0], idx[..., 1], clamp=True))


def resample_mask(mask: BinaryMask, size: int) -> BinaryMask:
    if size == mask.grid.width and mask.grid.width == mask.grid.height:
        return mask
    img = resample_to(Image2D(mask.grid, mask.values.astype(float)), size)
    return BinaryMask(img.grid, img.values >= 0.5, mask.kind)
