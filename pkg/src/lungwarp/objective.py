"""Similarity measures, bending energy and the composite registration loss.

The public functions take :class:`Image2D` inputs and return floats. The
``*Objective`` classes hold pre-built tensors for one resolution level and are
what the optimizer differentiates through.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np
import torch

from . import _core
from .imaging import BinaryMask, Image2D
from .transform import AffineTransform, VelocityLattice

log = logging.getLogger(__name__)


class Similarity(str, Enum):
    SSD = "ssd"
    NCC = "ncc"
    LNCC = "lncc"


@dataclass(frozen=True, eq=False)
class ObjectiveSpec:
    similarity: Similarity = Similarity.LNCC
    kernel: int = 11
    mask: BinaryMask | None = None
    alpha: float = 0.0
    epsilon_var: float = 1e-5

    def __post_init__(self):
        object.__setattr__(self, "similarity", Similarity(self.similarity))
        if self.similarity is Similarity.LNCC and (self.kernel < 3 or self.kernel % 2 == 0):
            raise ValueError(f"LNCC kernel must be odd and >= 3, got {self.kernel}")
        if self.alpha < 0:
            raise ValueError("alpha must be non-negative")
        if not self.epsilon_var > 0:
            raise ValueError("epsilon_var must be positive")


def _pair(f: Image2D, w: Image2D, mask: BinaryMask | None):
    if f.grid.shape != w.grid.shape:
        raise ValueError("images must share a grid")
    m = None
    if mask is not None:
        if mask.grid.shape != f.grid.shape:
            raise ValueError("mask does not match image grid")
        mask.require_nonempty("similarity mask")
        m = torch.as_tensor(np.array(mask.values))
    return _core.tensor(f.values), _core.tensor(w.values), m


def ssd_loss(f: Image2D, w: Image2D, mask: BinaryMask | None = None) -> float:
    a, b, m = _pair(f, w, mask)
    return float(_core.ssd(a, b, m))


def ncc_details(f: Image2D, w: Image2D, mask: BinaryMask | None = None,
                epsilon_var: float = 1e-5) -> tuple[float, bool]:
    """``(1 - pearson, degenerate)``."""
    a, b, m = _pair(f, w, mask)
    loss, degenerate = _core.ncc(a, b, m, epsilon_var)
    if degenerate:
        log.warning("NCC evaluated on a constant region; loss set to 1")
    return float(loss), degenerate


def ncc_loss(f: Image2D, w: Image2D, mask: BinaryMask | None = None, epsilon_var: float = 1e-5) -> float:
    return ncc_details(f, w, mask, epsilon_var)[0]


def lncc_loss(f: Image2D, w: Image2D, kernel: int, mask: BinaryMask | None = None,
              epsilon_var: float = 1e-5) -> float:
    if kernel % 2 == 0 or kernel > min(f.grid.shape):
        raise ValueError(f"kernel {kernel} must be odd and fit inside the image")
    a, b, m = _pair(f, w, mask)
    return float(_core.lncc(a, b, kernel, m, epsilon_var))


def bending_energy(v: np.ndarray, spacing: float = 1.0) -> float:
    v = np.asarray(v, dtype=float)
    if v.ndim == 2:
        v = v[None]
    if min(v.shape[1:]) < 3:
        raise ValueError("bending energy needs at least a 3x3 raster")
    return float(_core.bending(_core.tensor(v), spacing))


def similarity_tensor(spec: ObjectiveSpec, f: torch.Tensor, w: torch.Tensor,
                      mask: torch.Tensor | None, kernel: int | None = None) -> torch.Tensor:
    if spec.similarity is Similarity.SSD:
        return _core.ssd(f, w, mask)
    if spec.similarity is Similarity.NCC:
        return _core.ncc(f, w, mask, spec.epsilon_var)[0]
    return _core.lncc(f, w, kernel or spec.kernel, mask, spec.epsilon_var)


def _bending_grams(rows: np.ndarray, cols: np.ndarray, h: float):
    """Gram matrices such that the dense bending energy is a quadratic form.

    Each discrete second derivative of ``v = R c C^T`` is separable,
    ``D_a R c (D_b C)^T``, so its squared Frobenius norm equals
    ``sum(c * (G_r c G_c))`` with ``G = M^T M``.
    """
    def interior(m):
        return m[1:-1]

    def second(m):
        return (m[2:] - 2 * m[1:-1] + m[:-2]) / (h * h)

    def first(m):
        return (m[2:] - m[:-2]) / (2 * h)

    out = []
    for weight, r, c in ((1.0, interior(rows), second(cols)),
                         (2.0, first(rows), first(cols)),
                         (1.0, second(rows), interior(cols))):
        out.append((weight, _core.tensor(r.T @ r), _core.tensor(c.T @ c)))
    return out


class SvffdObjective:
    """Composite loss of one level as a function of lattice coefficients (mm)."""

    def __init__(self, spec: ObjectiveSpec, fixed: Image2D, moving: Image2D,
                 lattice: VelocityLattice, kernel: int | None = None):
        if fixed.grid != moving.grid:
            raise ValueError("fixed and moving grids differ")
        self.spec = spec
        self.grid = fixed.grid
        self.kernel = kernel or spec.kernel
        self.f, self.m, self.mask = _pair(fixed, moving, spec.mask)
        rows, cols = lattice.basis_matrices(self.grid)
        self.rows = _core.tensor(rows)
        self.cols = _core.tensor(cols)
        self.ident = _core.identity_positions(self.grid)
        self._bending_grams = _bending_grams(rows, cols, self.grid.spacing)

    def bending(self, coef: torch.Tensor) -> torch.Tensor:
        """Bending energy of the dense velocity, evaluated in coefficient space."""
        total = 0.0
        for weight, gr, gc in self._bending_grams:
            total = total + weight * (coef * (gr @ coef @ gc)).sum()
        return total / ((self.grid.height - 2) * (self.grid.width - 2))

    def velocity(self, coef: torch.Tensor) -> torch.Tensor:
        return _core.dense_from_coefficients(coef, self.rows, self.cols)

    def displacement(self, coef: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        return _core.exp_field(self.velocity(coef), self.grid, steps, self.ident)

    def terms(self, coef: torch.Tensor, steps: int | None = None) -> tuple[torch.Tensor, torch.Tensor]:
        v = self.velocity(coef)
        u = _core.exp_field(v, self.grid, steps, self.ident)
        warped = _core.warp(self.m, u, self.grid, self.ident)
        sim = similarity_tensor(self.spec, self.f, warped, self.mask, self.kernel)
        reg = self.bending(coef) if self.spec.alpha else torch.zeros((), dtype=_core.DTYPE)
        return sim, reg

    def __call__(self, coef: torch.Tensor, steps: int | None = None) -> torch.Tensor:
        sim, reg = self.terms(coef, steps)
        return sim + self.spec.alpha * reg


class AffineObjective:
    """Similarity after pull-back through ``p -> A p + t``; params are (A.ravel(), t)."""

    def __init__(self, spec: ObjectiveSpec, fixed: Image2D, moving: Image2D):
        if fixed.grid != moving.grid:
            raise ValueError("fixed and moving grids differ")
        self.spec = spec
        self.grid = fixed.grid
        self.f, self.m, self.mask = _pair(fixed, moving, spec.mask)
        self.ident = _core.identity_positions(self.grid)

    def warped(self, params: torch.Tensor) -> torch.Tensor:
        A = params[:4].reshape(2, 2)
        t = params[4:]
        pos = torch.einsum("ij,jhw->ihw", A, self.ident) + t[:, None, None]
        return _core.sample(self.m[None], pos, self.grid, padding="zeros")[0]

    def __call__(self, params: torch.Tensor) -> torch.Tensor:
        return similarity_tensor(self.spec, self.f, self.warped(params), self.mask)


def affine_params(affine: AffineTransform) -> np.ndarray:
    return np.concatenate([affine.A.ravel(), affine.t])


def composite_loss(spec: ObjectiveSpec, f: Image2D, m: Image2D, transform,
                   steps: int | None = None) -> tuple[float, np.ndarray]:
    """Loss and its gradient with respect to the transform parameters.

    For a :class:`VelocityLattice` the gradient has the coefficients' shape
    (per mm); for an :class:`AffineTransform` it is ``(dL/dA.ravel(), dL/dt)``.
    """
    if isinstance(transform, VelocityLattice):
        obj = SvffdObjective(spec, f, m, transform)
        theta = _core.tensor(transform.coefficients).requires_grad_(True)
        loss = obj(theta, steps)
    elif isinstance(transform, AffineTransform):
        obj = AffineObjective(spec, f, m)
        theta = _core.tensor(affine_params(transform)).requires_grad_(True)
        loss = obj(theta)
    else:
        raise TypeError(f"unsupported transform {type(transform).__name__}")
    (grad,) = torch.autograd.grad(loss, theta, allow_unused=True)
    grad = np.zeros(theta.shape) if grad is None else grad.numpy()
    return float(loss.detach()), grad


def normalize_intensity(img: Image2D, lo: float = 0.5, hi: float = 99.5) -> Image2D:
    """Rescale to [0, 1] between the given percentiles (clipped)."""
    a, b = np.percentile(img.values, [lo, hi])
    if b <= a:
        return img.with_values(np.zeros_like(img.values))
    return img.with_values(np.clip((img.values - a) / (b - a), 0.0, 1.0))

