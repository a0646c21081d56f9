"""Registration accuracy and regularity metrics."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import asdict, dataclass, fields

import numpy as np
import torch
from scipy import ndimage

from . import _core
from .imaging import BinaryMask, LandmarkSet
from .transform import DisplacementField, jacobian_analysis

_FOUR_CONNECTED = ndimage.generate_binary_structure(2, 1)

METRIC_FIELDS = ("dice_full", "dice_partial", "msd_full", "msd_partial", "hd_full",
                 "hd_partial", "tre_mean", "folding_ratio", "mmgjd")


@dataclass
class MetricsReport:
    phase: str
    dice_full: float | None = None
    dice_partial: float | None = None
    msd_full: float | None = None
    msd_partial: float | None = None
    hd_full: float | None = None
    hd_partial: float | None = None
    tre_mean: float | None = None
    folding_ratio: float | None = None
    mmgjd: float | None = None

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "MetricsReport":
        names = {f.name for f in fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


def warp_mask(mask: BinaryMask, phi: DisplacementField) -> BinaryMask:
    """Pull-back bilinear resampling of the 0/1 raster, re-binarised at 0.5."""
    if phi.grid.shape != mask.grid.shape:
        raise ValueError("displacement grid does not match mask grid")
    with torch.no_grad():
        out = _core.warp(_core.tensor(mask.values.astype(float)), _core.tensor(phi.u), phi.grid)
    return BinaryMask(phi.grid, out.numpy() >= 0.5, mask.kind)


def _check_pair(a: BinaryMask, b: BinaryMask):
    if a.grid.shape != b.grid.shape:
        raise ValueError("masks must share a grid")
    a.require_nonempty("first mask")
    b.require_nonempty("second mask")


def dice(a: BinaryMask, b: BinaryMask) -> float:
    _check_pair(a, b)
    inter = np.count_nonzero(a.values & b.values)
    return 2.0 * inter / (a.count + b.count)


def boundary(values: np.ndarray) -> np.ndarray:
    """Mask pixels removed by a 4-connected erosion (image border counts as outside)."""
    values = np.asarray(values, dtype=bool)
    return values & ~ndimage.binary_erosion(values, _FOUR_CONNECTED, border_value=0)


def surface_distances(a: BinaryMask, b: BinaryMask) -> tuple[float, float]:
    """Symmetric mean surface distance and Hausdorff distance in mm."""
    _check_pair(a, b)
    ba, bb = boundary(a.values), boundary(b.values)
    spacing = a.grid.spacing
    d_to_b = ndimage.distance_transform_edt(~bb, sampling=spacing)
    d_to_a = ndimage.distance_transform_edt(~ba, sampling=spacing)
    da = d_to_b[ba]
    db = d_to_a[bb]
    msd = 0.5 * (da.mean() + db.mean())
    hd = max(da.max(), db.max())
    return float(msd), float(hd)


def tre(fixed_lms: LandmarkSet, moving_lms: LandmarkSet, phi=None) -> float:
    """Mean |phi(fixed) - moving| over labels (mm); ``phi=None`` is the identity."""
    if sorted(fixed_lms.labels) != sorted(moving_lms.labels):
        raise ValueError("landmark labels do not match")
    p = fixed_lms.ordered()
    q = moving_lms.ordered()
    if phi is not None:
        p = phi(p)
    return float(np.linalg.norm(p - q, axis=1).mean())


def point_errors(phi, points: np.ndarray, targets: np.ndarray) -> np.ndarray:
    """Per-point |phi(p) - target| (mm)."""
    return np.linalg.norm(phi(np.atleast_2d(points)) - targets, axis=1)


def _mask_metrics(report: MetricsReport, suffix: str, fixed_mask, moving_mask, phi):
    if fixed_mask is None or moving_mask is None:
        return
    warped = moving_mask if phi is None else warp_mask(moving_mask, phi)
    setattr(report, f"dice_{suffix}", dice(fixed_mask, warped))
    msd, hd = surface_distances(fixed_mask, warped)
    setattr(report, f"msd_{suffix}", msd)
    setattr(report, f"hd_{suffix}", hd)


def metrics_for(phase: str, phi: DisplacementField | None, fixed_masks: dict, moving_masks: dict,
                fixed_lms: LandmarkSet | None, moving_lms: LandmarkSet | None) -> MetricsReport:
    """One report; ``phi=None`` means the pre-registration (identity) state.

    Mask dicts are keyed by ``"full"`` and ``"partial"``; missing entries give
    ``None`` fields.
    """
    report = MetricsReport(phase)
    for suffix in ("full", "partial"):
        _mask_metrics(report, suffix, fixed_masks.get(suffix), moving_masks.get(suffix), phi)
    if fixed_lms is not None and moving_lms is not None:
        report.tre_mean = tre(fixed_lms, moving_lms, phi)
    if phi is None:
        report.folding_ratio, report.mmgjd = 0.0, 0.0
    else:
        jac = jacobian_analysis(phi)
        report.folding_ratio, report.mmgjd = jac.folding_ratio, jac.mmgjd
    return report


def full_report(fixed_masks: dict, moving_masks: dict, fixed_lms, moving_lms,
                phi: DisplacementField) -> tuple[MetricsReport, MetricsReport]:
    before = metrics_for("before", None, fixed_masks, moving_masks, fixed_lms, moving_lms)
    after = metrics_for("after", phi, fixed_masks, moving_masks, fixed_lms, moving_lms)
    return before, after


def reports_csv(rows: list[tuple[str, MetricsReport]]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["pair", "phase", *METRIC_FIELDS])
    for name, rep in rows:
        writer.writerow([name, rep.phase, *(_fmt(getattr(rep, f)) for f in METRIC_FIELDS)])
    return buf.getvalue()


def _fmt(value) -> str:
    return "" if value is None else repr(float(value))


def lower_quantile(values, q: float) -> float:
    """Quantile with the 'lower' interpolation convention."""
    return float(np.quantile(np.asarray(values, dtype=float), q, method="lower"))


def aggregate(reports: list[MetricsReport]) -> dict:
    """Median and IQR (lower interpolation) per metric, skipping missing values."""
    out = {}
    for name in METRIC_FIELDS:
        vals = [getattr(r, name) for r in reports if getattr(r, name) is not None]
        if not vals:
            out[name] = None
            continue
        q1, med, q3 = (lower_quantile(vals, q) for q in (0.25, 0.5, 0.75))
        out[name] = {"median": med, "q25": q1, "q75": q3, "n": len(vals)}
    return out


def is_finite_report(report: MetricsReport) -> bool:
    return all(v is None or math.isfinite(v) for v in (getattr(report, f) for f in METRIC_FIELDS))
