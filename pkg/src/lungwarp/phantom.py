"""Synthetic chest-radiograph pairs with known diffeomorphic ground truth.

The fixed image plays the inspiration scan. The moving (expiration) image is
the fixed image pulled back through the inverse truth map, so registering
moving onto fixed should recover ``phi_true = exp(v)``.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from enum import Enum

import numpy as np
from scipy import ndimage

from .evalmetrics import dice, tre, warp_mask
from .imaging import (LANDMARK_LABELS, BinaryMask, Grid2D, Image2D, LandmarkSet,
                      MaskKind, smooth_array)
from .transform import (DisplacementField, VelocityLattice, jacobian_analysis, lattice_exp,
                        lattice_shape, spline_velocity, warp_image)

log = logging.getLogger(__name__)

N_PROBES = 36
MAX_RETRIES = 3


class IntensityModel(str, Enum):
    DARKFIELD = "darkfield"
    ATTENUATION = "attenuation"


@dataclass(frozen=True)
class PhantomSpec:
    size: int = 256
    seed: int = 0
    texture_scale: float = 3.0
    amplitude: float = 15.0
    stride: int = 32
    model: IntensityModel = IntensityModel.DARKFIELD
    spacing: float = 1.66
    bone_shift: tuple[float, float] = (0.0, -6.0)

    def __post_init__(self):
        object.__setattr__(self, "model", IntensityModel(self.model))
        if self.size < 32 or self.size & (self.size - 1):
            raise ValueError(f"size must be a power of two >= 32, got {self.size}")
        if not 0 <= self.amplitude <= self.size / 8:
            raise ValueError(f"amplitude must lie in [0, size/8], got {self.amplitude}")
        if self.stride < 4:
            raise ValueError("stride must be >= 4")

    @property
    def grid(self) -> Grid2D:
        return Grid2D(self.size, self.size, self.spacing)


@dataclass(eq=False)
class Phantom:
    spec: PhantomSpec
    fixed: Image2D
    moving: Image2D
    lattice: VelocityLattice
    phi_true: DisplacementField
    phi_inverse: DisplacementField
    fixed_masks: dict
    moving_masks: dict
    fixed_landmarks: LandmarkSet
    moving_landmarks: LandmarkSet
    probes: np.ndarray
    probe_targets: np.ndarray
    amplitude: float
    bone_mask: BinaryMask | None = None
    extras: dict = field(default_factory=dict)


def _geometry(size: int):
    """Analytic lung, heart and diaphragm layout on pixel coordinates."""
    s = float(size)
    j, i = np.mgrid[0:size, 0:size].astype(float)
    lungs = {}
    partial = {}
    for side, cx in (("right", 0.32 * s), ("left", 0.68 * s)):
        cy, a, b = 0.5 * s, 0.14 * s, 0.30 * s
        ellipse = ((i - cx) / a) ** 2 + ((j - cy) / b) ** 2 <= 1.0
        dome = 0.72 * s + 0.05 * s * ((i - cx) / a) ** 2
        lungs[side] = ellipse
        partial[side] = ellipse & (j < dome)
    heart = (i - 0.53 * s) ** 2 + (j - 0.74 * s) ** 2 <= (0.13 * s) ** 2
    for side in partial:
        partial[side] &= ~heart
    return lungs, partial, heart


def _landmarks(partial: dict, grid: Grid2D) -> LandmarkSet:
    """Apex and basal corners as extreme points of each partial lung mask."""
    pts = {}
    for side, mask in partial.items():
        j, i = np.nonzero(mask)
        lateral = -1.0 if side == "right" else 1.0
        pick = {
            "apex": np.argmin(j + 1e-3 * np.abs(i - i.mean())),
            "costophrenic": np.argmax(j + lateral * (i - i.mean())),
            "costocardiac": np.argmax(j - lateral * (i - i.mean())),
        }
        for name, k in pick.items():
            pts[f"{name}-{side}"] = grid.origin + grid.spacing * np.array([i[k], j[k]], dtype=float)
    return LandmarkSet([pts[lab] for lab in LANDMARK_LABELS], LANDMARK_LABELS)


def _texture(rng: np.random.Generator, size: int, scale: float) -> np.ndarray:
    noise = smooth_array(rng.standard_normal((size, size)), scale)
    return (noise - noise.mean()) / noise.std()


def _bones(size: int, shift=(0.0, 0.0)) -> np.ndarray:
    """Rib and clavicle bands (soft-edged) drawn at an optional pixel offset."""
    s = float(size)
    j, i = np.mgrid[0:size, 0:size].astype(float)
    i = i - shift[0]
    j = j - shift[1]
    out = np.zeros((size, size))
    half_width = max(1.5, 0.012 * s)
    for k in range(5):
        y0 = (0.26 + 0.11 * k) * s
        centre = y0 + 0.05 * s * ((i - 0.5 * s) / (0.4 * s)) ** 2
        out = np.maximum(out, np.clip(1.0 - np.abs(j - centre) / half_width, 0.0, 1.0))
    for sign in (-1.0, 1.0):
        centre = 0.17 * s + 0.12 * (sign * (i - 0.5 * s))
        band = np.clip(1.0 - np.abs(j - centre) / half_width, 0.0, 1.0)
        band *= (sign * (i - 0.5 * s) > 0.04 * s) & (sign * (i - 0.5 * s) < 0.4 * s)
        out = np.maximum(out, band)
    return out


def _truth_lattice(rng: np.random.Generator, spec: PhantomSpec, amplitude_px: float) -> VelocityLattice:
    grid = spec.grid
    ny, nx = lattice_shape(grid, spec.stride)
    knots_y = (np.arange(ny) - 1) * spec.stride / spec.size
    knots_x = (np.arange(nx) - 1) * spec.stride / spec.size
    ramp = np.clip((knots_y - 0.2) / 0.6, 0.0, 1.0)
    coef = np.zeros((2, ny, nx))
    coef[1] = -ramp[:, None]
    coef[0] = -0.15 * (knots_x[None, :] - 0.5) * 2 * ramp[:, None]
    coef += 0.2 * rng.standard_normal(coef.shape)
    lattice = VelocityLattice(grid, spec.stride, coef)
    vmax = np.abs(spline_velocity(lattice)).max()
    scale = 0.0 if vmax == 0 else amplitude_px * grid.spacing / vmax
    return VelocityLattice(grid, spec.stride, coef * scale)


def _probes(rng: np.random.Generator, partial: np.ndarray, grid: Grid2D) -> np.ndarray:
    interior = ndimage.binary_erosion(partial, iterations=3)
    j, i = np.nonzero(interior)
    pick = np.sort(rng.choice(len(i), size=N_PROBES, replace=False))
    return grid.origin + grid.spacing * np.stack([i[pick], j[pick]], axis=1).astype(float)


def make_phantom(spec: PhantomSpec) -> Phantom:
    grid = spec.grid
    rng = np.random.default_rng(spec.seed)
    lungs, partial, heart = _geometry(spec.size)
    full = lungs["left"] | lungs["right"]
    partial_all = partial["left"] | partial["right"]
    texture = _texture(rng, spec.size, spec.texture_scale)
    lung_signal = np.clip(1.0 + 0.25 * texture, 0.3, None)

    if spec.model is IntensityModel.DARKFIELD:
        values = np.where(partial_all, lung_signal, np.where(full, 0.5 * lung_signal, 0.0))
        soft = values
    else:
        j, i = np.mgrid[0:spec.size, 0:spec.size].astype(float)
        s = float(spec.size)
        body = ((i - 0.5 * s) / (0.46 * s)) ** 2 + ((j - 0.52 * s) / (0.48 * s)) ** 2 <= 1.0
        soft = np.where(body, 1.0, 0.0)
        soft = np.where(heart & body, 1.15, soft)
        soft = np.where(full & ~heart, 0.45 + 0.08 * texture, soft)
        values = soft + 0.8 * _bones(spec.size) * body

    amplitude = spec.amplitude
    lattice_rng_state = rng.bit_generator.state
    for attempt in range(MAX_RETRIES + 1):
        rng.bit_generator.state = lattice_rng_state
        lattice = _truth_lattice(rng, spec, amplitude)
        phi_true = lattice_exp(lattice)
        phi_inv = lattice_exp(lattice.negated())
        if jacobian_analysis(phi_true).detJ.min() > 0 and jacobian_analysis(phi_inv).detJ.min() > 0:
            break
        if attempt == MAX_RETRIES:
            raise RuntimeError(f"truth deformation folds even at amplitude {amplitude} px")
        log.info("phantom seed %d folds at amplitude %.2f px, halving", spec.seed, amplitude)
        amplitude /= 2

    fixed = Image2D(grid, values)
    if spec.model is IntensityModel.DARKFIELD:
        moving = warp_image(fixed, phi_inv)
        bone_mask = None
    else:
        moving_soft = warp_image(Image2D(grid, soft), phi_inv)
        moving_bones = _bones(spec.size, spec.bone_shift) * warp_image(Image2D(grid, body), phi_inv).values
        moving = moving_soft.with_values(moving_soft.values + 0.8 * moving_bones)
        bone_mask = BinaryMask(grid, _bones(spec.size) * body > 0.5, MaskKind.FULL)

    fixed_masks = {
        "full": BinaryMask(grid, full, MaskKind.FULL),
        "partial": BinaryMask(grid, partial_all, MaskKind.PARTIAL),
        "left": BinaryMask(grid, partial["left"], MaskKind.LEFT_PARTIAL),
        "right": BinaryMask(grid, partial["right"], MaskKind.RIGHT_PARTIAL),
    }
    moving_masks = {k: warp_mask(m, phi_inv) for k, m in fixed_masks.items()}
    fixed_lms = _landmarks(partial, grid)
    moving_lms = fixed_lms.with_points(phi_true(fixed_lms.points))
    probes = _probes(rng, partial_all, grid)
    return Phantom(spec, fixed, moving, lattice, phi_true, phi_inv, fixed_masks, moving_masks,
                   fixed_lms, moving_lms, probes, phi_true(probes), amplitude, bone_mask)


def phantom_suite(n: int, base_spec: PhantomSpec | None = None) -> tuple[list[Phantom], list[dict]]:
    """``n`` phantoms with consecutive seeds and a generation-time truth table."""
    if n < 1:
        raise ValueError("n must be >= 1")
    base_spec = base_spec or PhantomSpec()
    cases, table = [], []
    for k in range(n):
        ph = make_phantom(replace(base_spec, seed=base_spec.seed + k))
        u = ph.phi_true.u
        table.append({
            "seed": ph.spec.seed,
            "amplitude_px": ph.amplitude,
            "max_displacement_px": float(np.hypot(u[0], u[1]).max() / ph.spec.spacing),
            "dice_full_before": dice(ph.fixed_masks["full"], ph.moving_masks["full"]),
            "tre_before_mm": tre(ph.fixed_landmarks, ph.moving_landmarks),
        })
        cases.append(ph)
    return cases, table
