"""Adam, the adaptive stopping rule, multiresolution drivers and the two pipelines."""

from __future__ import annotations

import logging
import math
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage

from . import _core
from .evalmetrics import lower_quantile, metrics_for
from .imaging import (DEFAULT_PYRAMID_SIGMA, BinaryMask, Image2D, LandmarkSet, MaskKind,
                      build_pyramid, mask_pyramid)
from .objective import AffineObjective, ObjectiveSpec, Similarity, SvffdObjective, normalize_intensity
from .transform import (AffineTransform, DisplacementField, VelocityLattice, affine_field,
                        lattice_exp, warp_image)

log = logging.getLogger(__name__)

ROI_DILATION_PX = 25
ROI_CONCAVITY = 300.0


class OptimizationAborted(RuntimeError):
    """Non-finite loss or gradient, or an unrecoverable degenerate transform."""


@dataclass
class AdamState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    m: object = None
    v: object = None
    step: int = 0


def adam_step(state: AdamState, params, grad):
    """Bias-corrected Adam update; works on numpy arrays and torch tensors."""
    if isinstance(grad, torch.Tensor):
        finite = bool(torch.isfinite(grad).all())
    else:
        finite = bool(np.all(np.isfinite(grad)))
    if not finite:
        raise OptimizationAborted(f"non-finite gradient at Adam step {state.step + 1}")
    if state.m is None:
        state.m = grad * 0
        state.v = grad * 0
    state.step += 1
    state.m = state.beta1 * state.m + (1 - state.beta1) * grad
    state.v = state.beta2 * state.v + (1 - state.beta2) * grad * grad
    m_hat = state.m / (1 - state.beta1 ** state.step)
    v_hat = state.v / (1 - state.beta2 ** state.step)
    return params - state.lr * m_hat / (v_hat ** 0.5 + state.eps)


@dataclass(frozen=True)
class ConvergenceRule:
    window: int = 200
    threshold_factor: float = 1e-3
    max_steps: int = 3500

    def __post_init__(self):
        if self.window < 1:
            raise ValueError("window must be >= 1")
        if not self.threshold_factor > 0:
            raise ValueError("threshold_factor must be positive")


def check_convergence(rule: ConvergenceRule, loss_history: Sequence[float], initial_loss: float) -> bool:
    """Moving-average rule over the last ``window`` values (current one included)."""
    return convergence_reason(rule, loss_history, initial_loss) is not None


def convergence_reason(rule: ConvergenceRule, loss_history: Sequence[float], initial_loss: float) -> str | None:
    n = len(loss_history)
    if n == 0:
        raise ValueError("empty loss history")
    if n >= rule.window:
        recent = loss_history[-rule.window:]
        if abs(loss_history[-1] - math.fsum(recent) / rule.window) < rule.threshold_factor * abs(initial_loss):
            return "converged"
    if n >= rule.max_steps:
        return "max_steps"
    return None


@dataclass(frozen=True)
class MultiresSchedule:
    """Per-level settings; kernels and learning rates are listed coarse to fine."""

    levels: int = 4
    kernels: tuple[int, ...] = (11, 21, 41, 81)
    learning_rates: tuple[float, ...] = (1e-4, 1e-4, 1e-4, 1e-4)
    rule: ConvergenceRule = ConvergenceRule()
    stride: int = 10
    alpha: float = 100.0
    sigma: float = DEFAULT_PYRAMID_SIGMA
    normalize: bool = True

    def __post_init__(self):
        object.__setattr__(self, "kernels", tuple(int(k) for k in self.kernels))
        object.__setattr__(self, "learning_rates", tuple(float(x) for x in self.learning_rates))
        if len(self.kernels) != self.levels or len(self.learning_rates) != self.levels:
            raise ValueError("one kernel and one learning rate per level required")
        if self.stride < 1:
            raise ValueError("stride must be >= 1")


@dataclass(eq=False)
class RegistrationResult:
    phi: DisplacementField
    lattice: VelocityLattice | None = None
    affine: AffineTransform | None = None
    trajectories: list[list[float]] = field(default_factory=list)
    reasons: list[str] = field(default_factory=list)
    level_sizes: list[int] = field(default_factory=list)
    durations: list[float] = field(default_factory=list)
    duration: float = 0.0
    modality: str = "darkfield"
    affine_trajectories: list[list[float]] = field(default_factory=list)

    def convergence_log(self) -> dict:
        return {
            "modality": self.modality,
            "levels": [
                {"size": size, "steps": len(traj), "reason": reason,
                 "initial_loss": traj[0], "final_loss": traj[-1]}
                for size, traj, reason in zip(self.level_sizes, self.trajectories, self.reasons)
            ],
            "affine_levels": [
                {"steps": len(traj), "initial_loss": traj[0], "final_loss": traj[-1]}
                for traj in self.affine_trajectories
            ],
        }


def _half_extent(img: Image2D) -> float:
    """Scale between normalised [-1, 1] parameter units and mm."""
    g = img.grid
    return 0.5 * (max(g.width, g.height) - 1) * g.spacing


def _level_masks(mask: BinaryMask | None, levels: int):
    if mask is None:
        return [None] * levels
    return mask_pyramid(mask, levels)


def register_nonrigid(fixed: Image2D, moving: Image2D, schedule: MultiresSchedule | None = None,
                      spec: ObjectiveSpec | None = None,
                      initial: VelocityLattice | None = None) -> RegistrationResult:
    """Coarse-to-fine SVFFD registration of ``moving`` onto ``fixed``.

    One lattice (in physical space) is shared by all levels; Adam runs on
    coefficients expressed in normalised image units and restarts per level.
    """
    schedule = schedule or MultiresSchedule()
    spec = spec or ObjectiveSpec(Similarity.LNCC, schedule.kernels[-1], alpha=schedule.alpha)
    if fixed.grid != moving.grid:
        raise ValueError("fixed and moving images must share a grid")
    t_start = time.perf_counter()
    if schedule.normalize:
        fixed, moving = normalize_intensity(fixed), normalize_intensity(moving)
    fpyr = build_pyramid(fixed, schedule.levels, schedule.sigma)
    mpyr = build_pyramid(moving, schedule.levels, schedule.sigma)
    masks = _level_masks(spec.mask, schedule.levels)
    lattice = initial or VelocityLattice.zeros(fixed.grid, schedule.stride)
    scale = _half_extent(fixed)
    theta = _core.tensor(lattice.coefficients / scale)

    result = RegistrationResult(phi=DisplacementField.identity(fixed.grid))
    for level, (f_l, m_l, mask_l) in enumerate(zip(fpyr, mpyr, masks)):
        t_level = time.perf_counter()
        level_spec = replace(spec, mask=mask_l, kernel=schedule.kernels[level])
        obj = SvffdObjective(level_spec, f_l, m_l, lattice)
        state = AdamState(schedule.learning_rates[level])
        history: list[float] = []
        reason = None
        while reason is None:
            theta.requires_grad_(True)
            loss = obj(theta * scale)
            (grad,) = torch.autograd.grad(loss, theta)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise OptimizationAborted(f"non-finite loss at level {level} ({f_l.grid.width}px), "
                                          f"step {len(history) + 1}")
            history.append(value)
            reason = convergence_reason(schedule.rule, history, history[0])
            if reason is None:
                try:
                    theta = adam_step(state, theta.detach(), grad)
                except OptimizationAborted as exc:
                    raise OptimizationAborted(f"level {level} ({f_l.grid.width}px): {exc}") from exc
        theta = theta.detach()
        log.info("level %d (%dpx): %d steps, loss %.6g -> %.6g (%s)", level, f_l.grid.width,
                 len(history), history[0], history[-1], reason)
        result.trajectories.append(history)
        result.reasons.append(reason)
        result.level_sizes.append(f_l.grid.width)
        result.durations.append(time.perf_counter() - t_level)

    result.lattice = VelocityLattice(fixed.grid, schedule.stride, theta.numpy() * scale)
    result.phi = lattice_exp(result.lattice)
    result.duration = time.perf_counter() - t_start
    return result


def _affine_from_normalized(params: torch.Tensor, centre: torch.Tensor, half: float):
    """Normalised (A, t) about the image centre -> physical (A, t) parameter vector."""
    A = params[:4].reshape(2, 2)
    t = centre - A @ centre + half * params[4:]
    return torch.cat([A.reshape(-1), t])


def register_affine(fixed: Image2D, moving: Image2D, roi: BinaryMask | None,
                    steps: Sequence[int] = (800, 50, 50, 50), lr: float = 1e-3,
                    sigma: float = DEFAULT_PYRAMID_SIGMA, normalize: bool = True,
                    _retry: bool = True) -> tuple[AffineTransform, list[list[float]]]:
    """Multiresolution 6-DOF affine registration with (masked) NCC.

    ``steps`` are fixed per-level step counts, coarse to fine.
    """
    if roi is not None:
        roi.require_nonempty("registration ROI")
    levels = len(steps)
    if normalize:
        fixed, moving = normalize_intensity(fixed), normalize_intensity(moving)
    fpyr = build_pyramid(fixed, levels, sigma)
    mpyr = build_pyramid(moving, levels, sigma)
    masks = _level_masks(roi, levels)
    half = _half_extent(fixed)
    g = fixed.grid
    centre = _core.tensor([g.origin[0] + 0.5 * (g.width - 1) * g.spacing,
                           g.origin[1] + 0.5 * (g.height - 1) * g.spacing])
    theta = _core.tensor([1.0, 0.0, 0.0, 1.0, 0.0, 0.0])
    trajectories = []
    for level, (f_l, m_l, mask_l) in enumerate(zip(fpyr, mpyr, masks)):
        obj = AffineObjective(ObjectiveSpec(Similarity.NCC, mask=mask_l), f_l, m_l)
        state = AdamState(lr)
        history = []
        for step in range(steps[level]):
            theta.requires_grad_(True)
            loss = obj(_affine_from_normalized(theta, centre, half))
            (grad,) = torch.autograd.grad(loss, theta)
            value = float(loss.detach())
            if not math.isfinite(value):
                raise OptimizationAborted(f"affine level {level}: non-finite loss at step {step + 1}")
            history.append(value)
            theta = adam_step(state, theta.detach(), grad)
            det = float(torch.det(theta[:4].reshape(2, 2)))
            if not math.isfinite(det) or abs(det) < 1e-3:
                if not _retry:
                    raise OptimizationAborted("affine matrix became singular twice")
                log.warning("affine matrix degenerate at level %d; restarting with lr %.2g", level, lr / 2)
                return register_affine(fixed, moving, roi, steps, lr / 2, sigma, False, _retry=False)
        theta = theta.detach()
        trajectories.append(history)
    phys = _affine_from_normalized(theta, centre, half).numpy()
    return AffineTransform(phys[:4].reshape(2, 2), phys[4:]), trajectories


def _disk(radius: int) -> np.ndarray:
    y, x = np.mgrid[-radius:radius + 1, -radius:radius + 1]
    return x * x + y * y <= radius * radius


def prepare_attenuation_roi(partial_mask: BinaryMask, dilation: int = ROI_DILATION_PX,
                            concavity: float = ROI_CONCAVITY) -> BinaryMask:
    """Disk dilation followed by a concave hull, rasterised back onto the grid."""
    from concave_hull import concave_hull
    from skimage.draw import polygon

    partial_mask.require_nonempty("partial inspiration mask")
    values = partial_mask.values
    if dilation > 0:
        dist = ndimage.distance_transform_edt(~values)
        dilated = dist <= dilation
    else:
        dilated = values.copy()
    edge = dilated & ~ndimage.binary_erosion(dilated, border_value=0)
    rows, cols = np.nonzero(edge)
    points = np.stack([cols, rows], axis=1).astype(float)
    out = dilated.copy()
    if len(np.unique(points, axis=0)) >= 3:
        hull = np.asarray(concave_hull(points, concavity=concavity))
        rr, cc = polygon(hull[:, 1], hull[:, 0], shape=values.shape)
        out[rr, cc] = True
    return BinaryMask(partial_mask.grid, out, MaskKind.REGISTRATION_ROI)


@dataclass(frozen=True)
class PipelineConfig:
    """Default registration parameters for both modalities."""

    darkfield: MultiresSchedule = MultiresSchedule()
    attenuation: MultiresSchedule = MultiresSchedule(kernels=(5, 11, 21, 41), alpha=80.0)
    affine_steps: tuple[int, ...] = (800, 50, 50, 50)
    affine_lr: float = 1e-3
    roi_dilation: int = ROI_DILATION_PX
    roi_concavity: float = ROI_CONCAVITY
    epsilon_var: float = 1e-5


def run_pipeline(fixed: Image2D, moving: Image2D, modality: str = "darkfield",
                 config: PipelineConfig | None = None,
                 fixed_partial_mask: BinaryMask | None = None) -> RegistrationResult:
    """Dark-field: non-rigid only. Attenuation: masked affine then masked non-rigid."""
    config = config or PipelineConfig()
    t_start = time.perf_counter()
    if modality == "darkfield":
        sched = config.darkfield
        spec = ObjectiveSpec(Similarity.LNCC, sched.kernels[-1], alpha=sched.alpha,
                             epsilon_var=config.epsilon_var)
        result = register_nonrigid(fixed, moving, sched, spec)
    elif modality == "attenuation":
        if fixed_partial_mask is None:
            raise ValueError("attenuation pipeline needs the inspiration partial mask")
        roi = prepare_attenuation_roi(fixed_partial_mask, config.roi_dilation, config.roi_concavity)
        affine, affine_traj = register_affine(fixed, moving, roi, config.affine_steps, config.affine_lr,
                                              config.attenuation.sigma, config.attenuation.normalize)
        pre = warp_image(moving, affine_field(affine, moving.grid))
        sched = config.attenuation
        spec = ObjectiveSpec(Similarity.LNCC, sched.kernels[-1], mask=roi, alpha=sched.alpha,
                             epsilon_var=config.epsilon_var)
        result = register_nonrigid(fixed, pre, sched, spec)
        result.affine = affine
        result.affine_trajectories = affine_traj
        result.phi = result.phi.then_affine(affine)
    else:
        raise ValueError(f"unknown modality {modality!r}")
    result.modality = modality
    result.duration = time.perf_counter() - t_start
    return result


@dataclass(eq=False)
class RegistrationPair:
    """An inspiration/expiration pair plus optional annotations."""

    name: str
    fixed: Image2D
    moving: Image2D
    fixed_masks: dict = field(default_factory=dict)
    moving_masks: dict = field(default_factory=dict)
    fixed_landmarks: LandmarkSet | None = None
    moving_landmarks: LandmarkSet | None = None


SWEEP_ALPHAS = (1.0, 100.0, 200.0, 500.0)
SWEEP_STRIDES = (8, 9, 10)
SWEEP_COLUMNS = ("alpha", "stride", "dice_full", "dice_partial", "msd_full", "msd_partial",
                 "tre", "mmgjd", "duration_s")
_SWEEP_METRICS = {"dice_full": "dice_full", "dice_partial": "dice_partial", "msd_full": "msd_full",
                  "msd_partial": "msd_partial", "tre": "tre_mean", "mmgjd": "mmgjd"}


def _sweep_cell(args):
    pair, alpha, stride, base = args
    schedule = replace(base, alpha=float(alpha), stride=int(stride))
    try:
        result = run_pipeline(pair.fixed, pair.moving, "darkfield", PipelineConfig(darkfield=schedule))
    except (OptimizationAborted, ValueError) as exc:
        log.warning("sweep cell alpha=%g stride=%d failed on %s: %s", alpha, stride, pair.name, exc)
        return None, 0.0, str(exc)
    report = metrics_for("after", result.phi, pair.fixed_masks, pair.moving_masks,
                         pair.fixed_landmarks, pair.moving_landmarks)
    return report, result.duration, None


def parameter_sweep(pairs: Sequence[RegistrationPair], alphas: Sequence[float] = SWEEP_ALPHAS,
                    strides: Sequence[int] = SWEEP_STRIDES, base: MultiresSchedule | None = None,
                    workers: int = 1) -> list[dict]:
    """Dark-field pipeline over every (alpha, stride) cell; median metrics per cell.

    Medians use the lower-interpolation convention. Failed registrations are
    recorded in ``failures`` and excluded from the medians.
    """
    if not pairs:
        raise ValueError("parameter sweep needs at least one pair")
    base = base or MultiresSchedule()
    cells = [(a, s) for a in alphas for s in strides]
    jobs = [(pair, a, s, base) for a, s in cells for pair in pairs]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            outcomes = list(pool.map(_sweep_cell, jobs))
    else:
        outcomes = [_sweep_cell(job) for job in jobs]
    rows = []
    n = len(pairs)
    for k, (alpha, stride) in enumerate(cells):
        chunk = outcomes[k * n:(k + 1) * n]
        reports = [rep for rep, _, _ in chunk if rep is not None]
        row = {"alpha": float(alpha), "stride": int(stride)}
        for column, attr in _SWEEP_METRICS.items():
            vals = [getattr(r, attr) for r in reports if getattr(r, attr) is not None]
            row[column] = lower_quantile(vals, 0.5) if vals else None
        durations = [d for rep, d, _ in chunk if rep is not None]
        row["duration_s"] = lower_quantile(durations, 0.5) if durations else None
        row["failures"] = [f"{pair.name}: {err}" for pair, (_, _, err) in zip(pairs, chunk) if err]
        rows.append(row)
    return rows
