"""Affine and stationary-velocity B-spline transforms, and Jacobian analysis."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from . import _core
from .imaging import Grid2D, Image2D, LandmarkSet, bilinear_indices


@dataclass(frozen=True, eq=False)
class AffineTransform:
    """Physical-space map ``p -> A p + t`` (mm)."""

    A: np.ndarray = field(default_factory=lambda: np.eye(2))
    t: np.ndarray = field(default_factory=lambda: np.zeros(2))

    def __post_init__(self):
        object.__setattr__(self, "A", np.array(self.A, dtype=float).reshape(2, 2))
        object.__setattr__(self, "t", np.array(self.t, dtype=float).reshape(2))

    @classmethod
    def identity(cls) -> "AffineTransform":
        return cls()

    @property
    def det(self) -> float:
        return float(np.linalg.det(self.A))

    def __call__(self, points) -> np.ndarray:
        points = np.asarray(points, dtype=float)
        return points @ self.A.T + self.t

    def compose(self, inner: "AffineTransform") -> "AffineTransform":
        """``self ∘ inner``: apply ``inner`` first."""
        return AffineTransform(self.A @ inner.A, self.A @ inner.t + self.t)

    def inverse(self) -> "AffineTransform":
        Ainv = np.linalg.inv(self.A)
        return AffineTransform(Ainv, -Ainv @ self.t)

    def to_dict(self) -> dict:
        return {"A": self.A.tolist(), "t": self.t.tolist()}

    @classmethod
    def from_dict(cls, d: dict) -> "AffineTransform":
        return cls(d["A"], d["t"])


def lattice_shape(grid: Grid2D, stride: int) -> tuple[int, int]:
    """(ny, nx) control points covering ``grid`` with cubic support."""
    return (math.ceil(grid.height / stride) + 3, math.ceil(grid.width / stride) + 3)


@dataclass(frozen=True, eq=False)
class VelocityLattice:
    """Cubic B-spline coefficients of a stationary velocity field.

    ``grid`` is the finest-level image grid; control point ``(k, l)`` sits at
    ``origin + (k - 1, l - 1) * stride * spacing``. ``coefficients`` has shape
    ``(2, ny, nx)`` in mm.
    """

    grid: Grid2D
    stride: int
    coefficients: np.ndarray

    def __post_init__(self):
        coef = np.array(self.coefficients, dtype=float)
        expected = (2, *lattice_shape(self.grid, self.stride))
        if coef.shape != expected:
            raise ValueError(f"coefficients shape {coef.shape}, expected {expected}")
        if not np.all(np.isfinite(coef)):
            raise ValueError("non-finite lattice coefficients")
        coef.setflags(write=False)
        object.__setattr__(self, "coefficients", coef)
        object.__setattr__(self, "stride", int(self.stride))

    @classmethod
    def zeros(cls, grid: Grid2D, stride: int) -> "VelocityLattice":
        return cls(grid, stride, np.zeros((2, *lattice_shape(grid, stride))))

    @property
    def knot_spacing(self) -> float:
        return self.stride * self.grid.spacing

    def basis_matrices(self, level_grid: Grid2D) -> tuple[np.ndarray, np.ndarray]:
        """Row (H x ny) and column (W x nx) basis matrices for ``level_grid``."""
        ny, nx = self.coefficients.shape[1:]
        ks = self.knot_spacing
        s_lo = [(level_grid.origin[a] - self.grid.origin[a]) / ks + 1 for a in (0, 1)]
        s_hi = [(level_grid.extent[2 * a + 1] - self.grid.origin[a]) / ks + 1 for a in (0, 1)]
        if min(s_lo) < 1 - 1e-9 or math.floor(s_hi[0]) + 2 > nx - 1 or math.floor(s_hi[1]) + 2 > ny - 1:
            raise ValueError("velocity lattice does not cover the requested grid")
        rows = _core.spline_matrix(level_grid.height, level_grid.origin[1], level_grid.spacing,
                                   self.grid.origin[1], ks, ny)
        cols = _core.spline_matrix(level_grid.width, level_grid.origin[0], level_grid.spacing,
                                   self.grid.origin[0], ks, nx)
        return rows, cols

    def negated(self) -> "VelocityLattice":
        return VelocityLattice(self.grid, self.stride, -self.coefficients)

    def to_json(self) -> str:
        g = self.grid
        return json.dumps({
            "grid": {"width": g.width, "height": g.height, "spacing": g.spacing, "origin": list(g.origin)},
            "stride": self.stride,
            "dims": list(self.coefficients.shape),
            "coefficients": self.coefficients.tolist(),
        }, indent=1)

    @classmethod
    def from_json(cls, text: str) -> "VelocityLattice":
        d = json.loads(text)
        g = d["grid"]
        coef = np.asarray(d["coefficients"], dtype=float).reshape(d["dims"])
        return cls(Grid2D(g["width"], g["height"], g["spacing"], tuple(g["origin"])), d["stride"], coef)

    def save(self, path) -> None:
        from .fileio import atomic_write_text
        atomic_write_text(path, self.to_json() + "\n")

    @classmethod
    def load(cls, path) -> "VelocityLattice":
        return cls.from_json(Path(path).read_text())


@dataclass(frozen=True, eq=False)
class DisplacementField:
    """``phi(p) = p + u(p)`` on ``grid``; ``u`` has shape ``(2, H, W)`` in mm."""

    grid: Grid2D
    u: np.ndarray

    def __post_init__(self):
        u = np.array(self.u, dtype=float)
        if u.shape != (2, *self.grid.shape):
            raise ValueError(f"displacement shape {u.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(u)):
            raise ValueError("non-finite displacement")
        u.setflags(write=False)
        object.__setattr__(self, "u", u)

    @classmethod
    def identity(cls, grid: Grid2D) -> "DisplacementField":
        return cls(grid, np.zeros((2, *grid.shape)))

    def positions(self) -> np.ndarray:
        xs, ys = self.grid.coordinates()
        return np.stack([xs, ys]) + self.u

    def displacement_at(self, points) -> np.ndarray:
        """Edge-clamped bilinear interpolation of ``u`` at mm points ``(n, 2)``."""
        idx = self.grid.to_index(np.atleast_2d(points))
        return np.stack([bilinear_indices(self.u[c], idx[:, 0], idx[:, 1], clamp=True)
                         for c in (0, 1)], axis=1)

    def __call__(self, points) -> np.ndarray:
        points = np.atleast_2d(np.asarray(points, dtype=float))
        return points + self.displacement_at(points)

    def then_affine(self, affine: AffineTransform) -> "DisplacementField":
        """Dense field of ``affine ∘ self``."""
        pos = self.positions()
        mapped = np.einsum("ij,jhw->ihw", affine.A, pos) + affine.t[:, None, None]
        xs, ys = self.grid.coordinates()
        return DisplacementField(self.grid, mapped - np.stack([xs, ys]))


def affine_field(affine: AffineTransform, grid: Grid2D) -> DisplacementField:
    return DisplacementField.identity(grid).then_affine(affine)


@dataclass(frozen=True, eq=False)
class JacobianMap:
    grid: Grid2D
    detJ: np.ndarray
    gradMag: np.ndarray

    @property
    def folding_ratio(self) -> float:
        return float(np.count_nonzero(self.detJ < 0) / self.detJ.size)

    @property
    def mmgjd(self) -> float:
        return float(self.gradMag.mean())


def spline_velocity(lattice: VelocityLattice, level_grid: Grid2D | None = None) -> np.ndarray:
    """Dense velocity ``(2, H, W)`` of ``lattice`` sampled on ``level_grid``."""
    level_grid = level_grid or lattice.grid
    rows, cols = lattice.basis_matrices(level_grid)
    return rows @ lattice.coefficients @ cols.T


def exp_svf(v: np.ndarray, grid: Grid2D, steps: int | None = None) -> DisplacementField:
    """Exponential of a dense velocity raster by scaling and squaring.

    ``steps=None`` picks the smallest N with max|v|/2^N below
    ``_core.STEP_FRACTION`` of a pixel.
    """
    with torch.no_grad():
        u = _core.exp_field(_core.tensor(v), grid, steps)
    return DisplacementField(grid, u.numpy())


def lattice_exp(lattice: VelocityLattice, level_grid: Grid2D | None = None,
                steps: int | None = None) -> DisplacementField:
    level_grid = level_grid or lattice.grid
    return exp_svf(spline_velocity(lattice, level_grid), level_grid, steps)


def invert_svf(lattice: VelocityLattice, level_grid: Grid2D | None = None,
               steps: int | None = None) -> DisplacementField:
    return lattice_exp(lattice.negated(), level_grid, steps)


def warp_image(m: Image2D, phi: DisplacementField) -> Image2D:
    """``out(p) = m(phi(p))`` on phi's grid (which must be m's grid)."""
    if phi.grid != m.grid:
        raise ValueError("displacement grid does not match image grid")
    if not phi.u.any():
        return m
    with torch.no_grad():
        out = _core.warp(_core.tensor(m.values), _core.tensor(phi.u), m.grid)
    return m.with_values(out.numpy())


def apply_to_points(transform, pts):
    """Map landmarks (or an ``(n, 2)`` array) through a field or affine map."""
    points = pts.points if isinstance(pts, LandmarkSet) else np.atleast_2d(pts)
    mapped = transform(points)
    return pts.with_points(mapped) if isinstance(pts, LandmarkSet) else mapped


def compose_fields(outer: DisplacementField, inner: DisplacementField) -> DisplacementField:
    """Dense ``outer ∘ inner`` (``inner`` applied first), edge-clamped lookup."""
    pos = inner.positions()
    flat = pos.reshape(2, -1).T
    return DisplacementField(inner.grid, inner.u + outer.displacement_at(flat).T.reshape(inner.u.shape))


def jacobian_analysis(phi: DisplacementField) -> JacobianMap:
    """det(grad phi) by central differences (one-sided at borders), plus |grad detJ|."""
    h = phi.grid.spacing
    dux_dy, dux_dx = np.gradient(phi.u[0], h)
    duy_dy, duy_dx = np.gradient(phi.u[1], h)
    det = (1 + dux_dx) * (1 + duy_dy) - dux_dy * duy_dx
    gy, gx = np.gradient(det, h)
    return JacobianMap(phi.grid, det, np.hypot(gx, gy))
