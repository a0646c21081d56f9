"""Expiration/inspiration signal ratios and their regional summaries."""

from __future__ import annotations

import csv
import io
import json
import logging
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import optimize, stats

from .imaging import BinaryMask, Grid2D, Image2D

log = logging.getLogger(__name__)

RATIO_FLOOR = 1e-15
HUBER_DELTA = 1.35


@dataclass(frozen=True, eq=False)
class RatioImage:
    grid: Grid2D
    r: np.ndarray
    modality: str = "darkfield"


def ratio_image(warped_exp: Image2D, insp: Image2D, floor: float = RATIO_FLOOR,
                modality: str = "darkfield") -> RatioImage:
    """``warped_exp / insp`` with NaN wherever either operand is below ``floor``."""
    if warped_exp.grid.shape != insp.grid.shape:
        raise ValueError("images must share a grid")
    num, den = warped_exp.values, insp.values
    valid = (num >= floor) & (den >= floor)
    r = np.full(num.shape, np.nan)
    np.divide(num, den, out=r, where=valid)
    return RatioImage(insp.grid, r, modality)


def _huber_scale(r: np.ndarray, w: np.ndarray, delta: float) -> float:
    """Minimiser over sigma of sum w * (sigma + sigma * H(r / sigma)) for fixed residuals."""
    a = np.abs(r)
    total = w.sum()

    def dfdsigma(sigma):
        inner = a <= delta * sigma
        return total - delta**2 * w[~inner].sum() - (w[inner] * a[inner] ** 2).sum() / sigma**2

    top = a.max()
    if top == 0.0:
        return 0.0
    lo, hi = top * 1e-12, 2.0 * max(top / delta, math.sqrt((w * a**2).sum() / total))
    if dfdsigma(lo) >= 0:
        return lo
    return optimize.brentq(dfdsigma, lo, hi, xtol=1e-14 * top, rtol=1e-12)


def huber_fit(xs, ys, delta: float = HUBER_DELTA, tol: float = 1e-8, max_iter: int = 200,
              weights=None) -> tuple[float, float]:
    """Robust line fit ``y = slope * x + intercept``.

    Minimises ``sum(sigma + sigma * H_delta((y - x b) / sigma))`` jointly over
    the line and the scale ``sigma`` (H is quadratic up to ``delta`` and linear
    beyond), alternating an exact scale update with a reweighted least-squares
    step.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    w = np.ones_like(x) if weights is None else np.asarray(weights, dtype=float)
    if x.shape != y.shape or x.ndim != 1:
        raise ValueError("xs and ys must be 1-D and of equal length")
    if len(np.unique(x)) < 2:
        raise ValueError("need at least two distinct x values")
    X = np.stack([x, np.ones_like(x)], axis=1)

    def wls(weight):
        sw = np.sqrt(weight)
        return np.linalg.lstsq(X * sw[:, None], y * sw, rcond=None)[0]

    beta = wls(w)
    for _ in range(max_iter):
        r = y - X @ beta
        sigma = _huber_scale(r, w, delta)
        if sigma <= 1e-300 * max(1.0, np.abs(y).max()):
            break
        a = np.abs(r)
        irls = np.where(a <= delta * sigma, 1.0, delta * sigma / np.maximum(a, 1e-300))
        new = wls(w * irls)
        change = np.abs(new - beta).max()
        beta = new
        if change < tol * max(1.0, np.abs(beta).max()):
            break
    return float(beta[0]), float(beta[1])


@dataclass
class CCProjection:
    side: str
    rows: np.ndarray
    means: np.ndarray
    counts: np.ndarray
    slope: float
    intercept: float

    def to_rows(self) -> list[tuple[float, float, str]]:
        return [(float(r), float(m), self.side) for r, m in zip(self.rows, self.means)]


def cc_projection(ratio: RatioImage, side_mask: BinaryMask, side: str = "left",
                  weighted: bool = False, delta: float = HUBER_DELTA) -> CCProjection:
    """Row-wise mean ratio inside a lung mask versus distance from its apex (mm)."""
    if side_mask.grid.shape != ratio.grid.shape:
        raise ValueError("mask does not match ratio grid")
    side_mask.require_nonempty(f"{side} mask")
    values = side_mask.values
    occupied = np.nonzero(values.any(axis=1))[0]
    if len(occupied) < 2:
        raise ValueError(f"{side} mask spans fewer than two rows")
    apex = occupied[0]
    rows, means, counts = [], [], []
    for row in occupied:
        vals = ratio.r[row][values[row]]
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            continue
        rows.append((row - apex) * ratio.grid.spacing)
        means.append(vals.mean())
        counts.append(vals.size)
    rows, means, counts = np.array(rows), np.array(means), np.array(counts)
    if len(rows) < 2:
        raise ValueError(f"{side} mask has fewer than two rows with finite ratios")
    slope, intercept = huber_fit(rows, means, delta, weights=counts if weighted else None)
    return CCProjection(side, rows, means, counts, slope, intercept)


@dataclass
class LungFieldStats:
    mean_upper: float
    mean_middle: float
    mean_lower: float
    count_upper: int
    count_middle: int
    count_lower: int
    band_rule: str = "equal-rows"

    @property
    def means(self) -> tuple[float, float, float]:
        return (self.mean_upper, self.mean_middle, self.mean_lower)


def band_rows(mask: np.ndarray) -> list[np.ndarray]:
    """Occupied rows split into three contiguous bands; remainder goes to the lower bands."""
    occupied = np.nonzero(mask.any(axis=1))[0]
    n = len(occupied)
    if n < 3:
        raise ValueError("mask spans fewer than three rows")
    base, rem = divmod(n, 3)
    sizes = [base, base + (rem >= 2), base + (rem >= 1)]
    edges = np.cumsum([0, *sizes])
    return [occupied[edges[k]:edges[k + 1]] for k in range(3)]


def lung_fields(ratio: RatioImage, left_mask: BinaryMask, right_mask: BinaryMask) -> LungFieldStats:
    pooled = [np.zeros(ratio.grid.shape, dtype=bool) for _ in range(3)]
    for mask in (left_mask, right_mask):
        mask.require_nonempty("lung mask")
        for k, rows in enumerate(band_rows(mask.values)):
            pooled[k][rows] |= mask.values[rows]
    means, counts = [], []
    for band in pooled:
        vals = ratio.r[band]
        vals = vals[np.isfinite(vals)]
        if vals.size == 0:
            raise ValueError("lung field without finite ratio pixels")
        means.append(float(vals.mean()))
        counts.append(int(vals.size))
    return LungFieldStats(*means, *counts)


def vlc_rel(v_insp: float, v_exp: float) -> float:
    """Relative vital lung capacity ``(V_insp - V_exp) / V_insp``."""
    if not v_insp > 0:
        raise ValueError("inspiration volume must be positive")
    value = (v_insp - v_exp) / v_insp
    if value < 0:
        log.warning("negative relative vital lung capacity %.3f (implausible breathing manoeuvre)", value)
    return value


def spearman(xs, ys) -> tuple[float, float]:
    """Spearman's rho with mid-ranks and a two-sided t-approximation p-value.

    Returns ``(nan, nan)`` when either variable has no rank variance.
    """
    x = np.asarray(xs, dtype=float)
    y = np.asarray(ys, dtype=float)
    n = len(x)
    if n < 3 or len(y) != n:
        raise ValueError("need at least three paired observations")
    rx = stats.rankdata(x, method="average")
    ry = stats.rankdata(y, method="average")
    rx -= rx.mean()
    ry -= ry.mean()
    denom = math.sqrt(float(rx @ rx) * float(ry @ ry))
    if denom == 0:
        log.warning("Spearman correlation undefined (constant ranks)")
        return math.nan, math.nan
    rs = float(np.clip(rx @ ry / denom, -1.0, 1.0))
    if abs(rs) == 1.0:
        return rs, 0.0
    t = rs * math.sqrt((n - 2) / (1 - rs * rs))
    return rs, float(2 * stats.t.sf(abs(t), n - 2))


@dataclass
class CohortRecord:
    subject: str
    vlc_rel: float
    fleischner: int
    field_means: tuple[float, float, float] = (math.nan, math.nan, math.nan)
    slopes: dict = field(default_factory=dict)

    def __post_init__(self):
        if int(self.fleischner) not in range(6):
            raise ValueError(f"Fleischner score must be 0-5, got {self.fleischner}")
        self.fleischner = int(self.fleischner)
        if not math.isfinite(self.vlc_rel):
            raise ValueError("vlc_rel must be finite")


COHORT_COLUMNS = ("subject", "vlc_rel", "fleischner", "mean_upper", "mean_middle", "mean_lower",
                  "slope_left", "slope_right")


def cohort_table(records: list[CohortRecord]) -> dict:
    """Spearman correlation of every regional summary with VLC_rel, plus table rows."""
    if len(records) < 3:
        raise ValueError("need at least three cohort records")
    vlc = [r.vlc_rel for r in records]
    rows = []
    for r in records:
        rows.append({
            "subject": r.subject, "vlc_rel": r.vlc_rel, "fleischner": r.fleischner,
            "mean_upper": r.field_means[0], "mean_middle": r.field_means[1],
            "mean_lower": r.field_means[2],
            "slope_left": r.slopes.get("left", math.nan), "slope_right": r.slopes.get("right", math.nan),
        })
    correlations = {}
    for key in COHORT_COLUMNS[3:]:
        vals = [row[key] for row in rows]
        pairs = [(v, x) for v, x in zip(vlc, vals) if math.isfinite(x)]
        if len(pairs) < 3:
            correlations[key] = {"r_s": None, "p": None, "n": len(pairs)}
            continue
        rs, p = spearman(*zip(*pairs))
        correlations[key] = {"r_s": None if math.isnan(rs) else rs,
                             "p": None if math.isnan(p) else p, "n": len(pairs)}
    return {"rows": rows, "correlations": correlations,
            "metadata": {"band_rule": "equal-rows", "cc_fit": "huber, unweighted row means"}}


def _cell(value) -> str:
    if isinstance(value, (str, int)):
        return str(value)
    return repr(float(value))


def cohort_csv(table: dict) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(COHORT_COLUMNS)
    for row in table["rows"]:
        writer.writerow([_cell(row[c]) for c in COHORT_COLUMNS])
    return buf.getvalue()


def cohort_json(table: dict) -> str:
    def clean(v):
        if isinstance(v, float) and not math.isfinite(v):
            return None
        return v
    rows = [{k: clean(v) for k, v in row.items()} for row in table["rows"]]
    return json.dumps({**table, "rows": rows}, indent=1, sort_keys=True)


def projection_csv(projections: list[CCProjection]) -> str:
    lines = ["cc_mm,mean_ratio,side"]
    for proj in projections:
        lines += [f"{float(r)!r},{float(m)!r},{s}" for r, m, s in proj.to_rows()]
    return "\n".join(lines) + "\n"


def stats_dict(stats_: LungFieldStats) -> dict:
    return asdict(stats_)
