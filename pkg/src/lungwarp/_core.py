"""Differentiable torch kernels shared by the transform, objective and optimizer.

Everything runs in float64 on the CPU. Vector fields are ``(2, H, W)`` tensors
in millimetres with component 0 along x (columns) and 1 along y (rows).
"""

from __future__ import annotations

import logging
import math

import numpy as np
import torch
import torch.nn.functional as F

from .imaging import Grid2D

log = logging.getLogger(__name__)

DTYPE = torch.float64
MAX_SQUARING_STEPS = 16
# largest admissible per-step displacement, as a fraction of the pixel spacing
STEP_FRACTION = 0.5 / 64


def tensor(x) -> torch.Tensor:
    if isinstance(x, torch.Tensor):
        return x.to(DTYPE)
    return torch.tensor(np.asarray(x), dtype=DTYPE)


def bspline3(t):
    """Uniform cubic B-spline basis (works on numpy arrays and tensors)."""
    a = abs(t)
    inner = (4.0 - 6.0 * a**2 + 3.0 * a**3) / 6.0
    outer = (2.0 - a) ** 3 / 6.0
    if isinstance(t, torch.Tensor):
        return torch.where(a < 1, inner, torch.where(a < 2, outer, torch.zeros_like(a)))
    return np.where(a < 1, inner, np.where(a < 2, outer, 0.0))


def spline_matrix(npix: int, pix_origin: float, pix_spacing: float,
                  knot_origin: float, knot_spacing: float, ncoef: int) -> np.ndarray:
    """``M[i, k] = B3(s_i - k)`` with ``s_i`` the lattice coordinate of pixel ``i``.

    Knot ``k`` sits at ``knot_origin + (k - 1) * knot_spacing``.
    """
    x = pix_origin + pix_spacing * np.arange(npix)
    s = (x - knot_origin) / knot_spacing + 1.0
    return bspline3(s[:, None] - np.arange(ncoef)[None, :])


def dense_from_coefficients(coef: torch.Tensor, rows: torch.Tensor, cols: torch.Tensor) -> torch.Tensor:
    """(2, ny, nx) coefficients -> (2, H, W) raster via separable basis matrices."""
    return rows @ coef @ cols.T


def identity_positions(grid: Grid2D) -> torch.Tensor:
    xs, ys = grid.coordinates()
    return tensor(np.stack([xs, ys]))


def _normalized(pos: torch.Tensor, grid: Grid2D) -> torch.Tensor:
    """(2, ...) mm positions -> (1, ..., 2) grid_sample coordinates (align_corners)."""
    ox, oy = grid.origin
    nx = 2.0 * (pos[0] - ox) / ((grid.width - 1) * grid.spacing) - 1.0
    ny = 2.0 * (pos[1] - oy) / ((grid.height - 1) * grid.spacing) - 1.0
    return torch.stack([nx, ny], dim=-1)[None]


def sample(field: torch.Tensor, pos: torch.Tensor, grid: Grid2D, padding: str = "zeros") -> torch.Tensor:
    """Bilinear lookup of ``field`` ((C, H, W) on ``grid``) at mm positions ``pos`` ((2, ...)).

    ``padding="zeros"`` embeds the raster in zeros, ``"border"`` clamps to the edge.
    """
    out_shape = pos.shape[1:]
    p = pos.reshape(2, 1, -1)
    out = F.grid_sample(field[None], _normalized(p, grid), mode="bilinear",
                        padding_mode=padding, align_corners=True)
    return out[0].reshape(field.shape[0], *out_shape)


def squaring_steps(v: torch.Tensor, spacing: float, cap: int = MAX_SQUARING_STEPS,
                   fraction: float = STEP_FRACTION) -> int:
    """Smallest N with max|v| / 2**N < fraction * spacing, capped at ``cap``."""
    vmax = float(v.detach().abs().max()) if v.numel() else 0.0
    if vmax == 0.0:
        return 0
    limit = fraction * spacing
    n = max(0, math.floor(math.log2(vmax / limit)) + 1)
    while n > 0 and vmax / 2 ** (n - 1) < limit:
        n -= 1
    while vmax / 2**n >= limit:
        n += 1
    if n > cap:
        log.warning("scaling and squaring capped at %d steps (max |v| = %.3g mm)", cap, vmax)
        n = cap
    return n


def exp_field(v: torch.Tensor, grid: Grid2D, steps: int | None = None,
              ident: torch.Tensor | None = None) -> torch.Tensor:
    """Scaling and squaring: displacement ``u`` with ``exp(v) = id + u``."""
    if steps is None:
        steps = squaring_steps(v, grid.spacing)
    if ident is None:
        ident = identity_positions(grid)
    u = v / 2**steps
    for _ in range(steps):
        u = u + sample(u, ident + u, grid, padding="border")
    return u


def warp(img: torch.Tensor, u: torch.Tensor, grid: Grid2D, ident: torch.Tensor | None = None) -> torch.Tensor:
    """Pull-back warp of an (H, W) image by ``id + u``."""
    if ident is None:
        ident = identity_positions(grid)
    return sample(img[None], ident + u, grid, padding="zeros")[0]


def box_sum(x: torch.Tensor, k: int) -> torch.Tensor:
    """k x k window sums of an (H, W) tensor with zero padding."""
    r = k // 2
    x = F.pad(x[None, None], (r, r, r, r))[0, 0]
    c = torch.cumsum(x, 0)
    c = torch.cat([torch.zeros_like(c[:1]), c], 0)
    x = c[k:] - c[:-k]
    c = torch.cumsum(x, 1)
    c = torch.cat([torch.zeros_like(c[:, :1]), c], 1)
    return c[:, k:] - c[:, :-k]


def _reduce(values: torch.Tensor, mask: torch.Tensor | None) -> torch.Tensor:
    # same summation path with and without a mask
    if mask is None:
        return values.sum() / values.numel()
    return torch.where(mask, values, torch.zeros_like(values)).sum() / int(mask.sum())


def ssd(f: torch.Tensor, w: torch.Tensor, mask: torch.Tensor | None = None) -> torch.Tensor:
    return _reduce((f - w) ** 2, mask)


def ncc(f: torch.Tensor, w: torch.Tensor, mask: torch.Tensor | None = None,
        eps: float = 1e-5) -> tuple[torch.Tensor, bool]:
    """Returns ``(1 - pearson, degenerate)``; degenerate regions give loss 1."""
    if mask is None:
        f, w = f.reshape(-1), w.reshape(-1)
    else:
        f, w = f[mask], w[mask]
    fc = f - f.mean()
    wc = w - w.mean()
    vf = (fc * fc).mean()
    vw = (wc * wc).mean()
    if float(vf.detach()) <= eps or float(vw.detach()) <= eps:
        return 1.0 - 0.0 * (fc * wc).mean(), True
    return 1.0 - (fc * wc).mean() / torch.sqrt(vf * vw), False


def lncc(f: torch.Tensor, w: torch.Tensor, kernel: int, mask: torch.Tensor | None = None,
         eps: float = 1e-5) -> torch.Tensor:
    """``1 - mean(cc)`` with cc the squared local correlation in k x k windows.

    Windows are clipped to the image, so border statistics use fewer pixels.
    """
    n = box_sum(torch.ones_like(f), kernel)
    sf = box_sum(f, kernel)
    sw = box_sum(w, kernel)
    sff = box_sum(f * f, kernel)
    sww = box_sum(w * w, kernel)
    sfw = box_sum(f * w, kernel)
    cross = sfw - sf * sw / n
    var_f = sff - sf * sf / n
    var_w = sww - sw * sw / n
    cc = cross * cross / (var_f * var_w + eps)
    return 1.0 - _reduce(cc, mask)


def bending(v: torch.Tensor, spacing: float) -> torch.Tensor:
    """Mean over interior pixels of the summed per-component bending energy density."""
    h2 = spacing * spacing
    c = v[:, 1:-1, 1:-1]
    dxx = (v[:, 1:-1, 2:] - 2 * c + v[:, 1:-1, :-2]) / h2
    dyy = (v[:, 2:, 1:-1] - 2 * c + v[:, :-2, 1:-1]) / h2
    dxy = (v[:, 2:, 2:] - v[:, 2:, :-2] - v[:, :-2, 2:] + v[:, :-2, :-2]) / (4 * h2)
    density = (dxx**2 + 2 * dxy**2 + dyy**2).sum(0)
    return density.mean()
