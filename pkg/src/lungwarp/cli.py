"""Command-line entry point: ``lungwarp {register,evaluate,analyze,sweep,phantom}``.

A *pair directory* holds ``fixed.lw2d`` and ``moving.lw2d`` plus optional
``{fixed,moving}_{full,partial,left,right}.pgm`` masks,
``{fixed,moving}_landmarks.csv`` and a ``pair.json`` with per-pair settings
(currently ``shift_px``). Result directories are keyed by the pair
directory's name.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, replace
from pathlib import Path

import numpy as np

from . import analysis, fileio
from .config import ConfigError, RunConfig, default_config, dumps, load
from .evalmetrics import METRIC_FIELDS, aggregate, metrics_for, reports_csv
from .imaging import (BinaryMask, Image2D, LandmarkSet, MaskKind, pad_to_square, resample_mask,
                      resample_to, shift_horizontal)
from .optimize import (SWEEP_COLUMNS, OptimizationAborted, RegistrationPair, parameter_sweep,
                       run_pipeline)
from .phantom import IntensityModel, PhantomSpec, make_phantom
from .transform import AffineTransform, VelocityLattice, lattice_exp, warp_image

log = logging.getLogger("lungwarp")

EXIT_OK, EXIT_CONFIG, EXIT_IO, EXIT_ABORTED = 0, 2, 3, 4
MASK_KEYS = {"full": MaskKind.FULL, "partial": MaskKind.PARTIAL,
             "left": MaskKind.LEFT_PARTIAL, "right": MaskKind.RIGHT_PARTIAL}
FAILED_MARKER = "FAILED"


class InputError(RuntimeError):
    """Missing or unreadable input data."""


# ----------------------------------------------------------------------------- pair I/O

def _pad_shift(img: Image2D, config: RunConfig, shift: int) -> Image2D:
    out = pad_to_square(img, config.pad_size or max(img.grid.width, img.grid.height))
    return shift_horizontal(out, shift) if shift else out


def _prep_image(img: Image2D, config: RunConfig, shift: int = 0) -> Image2D:
    return resample_to(_pad_shift(img, config, shift), config.target_size)


def _prep_mask(mask: BinaryMask, config: RunConfig, shift: int = 0) -> BinaryMask:
    padded = _pad_shift(Image2D(mask.grid, mask.values.astype(float)), config, shift)
    return resample_mask(BinaryMask(padded.grid, padded.values > 0.5, mask.kind), config.target_size)


def load_pair(pair_dir, config: RunConfig) -> RegistrationPair:
    """Read and preprocess (pad, shift moving, resample) one pair directory."""
    pair_dir = Path(pair_dir)
    try:
        fixed = fileio.read_image(pair_dir / "fixed.lw2d")
        moving = fileio.read_image(pair_dir / "moving.lw2d")
        meta_path = pair_dir / "pair.json"
        shift = config.shift_px
        if meta_path.exists():
            shift = int(json.loads(meta_path.read_text()).get("shift_px", shift))
        if fixed.grid != moving.grid:
            raise InputError(f"{pair_dir}: fixed and moving grids differ")
        masks = {"fixed": {}, "moving": {}}
        for role in masks:
            for key, kind in MASK_KEYS.items():
                path = pair_dir / f"{role}_{key}.pgm"
                if path.exists():
                    mask = fileio.read_mask(path, fixed.grid, kind)
                    mask.require_nonempty(str(path))
                    masks[role][key] = _prep_mask(mask, config, shift if role == "moving" else 0)
        lms = {}
        for role in ("fixed", "moving"):
            path = pair_dir / f"{role}_landmarks.csv"
            lms[role] = fileio.read_landmarks(path) if path.exists() else None
    except (OSError, ValueError) as exc:
        raise InputError(str(exc)) from exc
    if lms["moving"] is not None and shift:
        lms["moving"] = lms["moving"].with_points(lms["moving"].points + [shift * fixed.grid.spacing, 0.0])
    return RegistrationPair(pair_dir.name, _prep_image(fixed, config), _prep_image(moving, config, shift),
                            masks["fixed"], masks["moving"], lms["fixed"], lms["moving"])


def write_pair(pair_dir, fixed: Image2D, moving: Image2D, fixed_masks: dict, moving_masks: dict,
               fixed_lms: LandmarkSet | None, moving_lms: LandmarkSet | None) -> None:
    pair_dir = Path(pair_dir)
    fileio.write_image(pair_dir / "fixed.lw2d", fixed)
    fileio.write_image(pair_dir / "moving.lw2d", moving)
    for role, masks in (("fixed", fixed_masks), ("moving", moving_masks)):
        for key, mask in masks.items():
            fileio.write_pgm(pair_dir / f"{role}_{key}.pgm", mask)
    if fixed_lms is not None:
        fileio.write_landmarks(pair_dir / "fixed_landmarks.csv", fixed_lms)
    if moving_lms is not None:
        fileio.write_landmarks(pair_dir / "moving_landmarks.csv", moving_lms)


def _dump_json(obj) -> str:
    return json.dumps(obj, indent=1, sort_keys=True) + "\n"


def _mark_failed(directory: Path, message: str) -> None:
    fileio.atomic_write_text(directory / FAILED_MARKER, message + "\n")


def _clear_failed(directory: Path) -> None:
    marker = directory / FAILED_MARKER
    if marker.exists():
        marker.unlink()


def _guard(directory: Path, func, *args) -> int:
    """Run ``func`` mapping failures onto exit codes and a failure marker."""
    try:
        func(*args)
    except (InputError, OSError) as exc:
        log.error("%s: input/output failure: %s", directory.name, exc)
        _mark_failed(directory, f"io: {exc}")
        return EXIT_IO
    except OptimizationAborted as exc:
        log.error("%s: optimisation aborted: %s", directory.name, exc)
        _mark_failed(directory, f"aborted: {exc}")
        return EXIT_ABORTED
    _clear_failed(directory)
    return EXIT_OK


def _parallel(func, jobs, workers: int) -> list:
    if workers > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(max_workers=min(workers, len(jobs))) as pool:
            return list(pool.map(func, jobs))
    return [func(job) for job in jobs]


# ----------------------------------------------------------------------------- register

def _load_transform(result_dir: Path):
    data = json.loads((result_dir / "transform.json").read_text())
    lattice = VelocityLattice.from_json(json.dumps(data["lattice"]))
    affine = AffineTransform.from_dict(data["affine"]) if data.get("affine") else None
    phi = lattice_exp(lattice)
    if affine is not None:
        phi = phi.then_affine(affine)
    return lattice, affine, phi


def _register_pair(pair_dir: Path, out: Path, config: RunConfig) -> None:
    pair = load_pair(pair_dir, config)
    partial = pair.fixed_masks.get("partial")
    if config.modality == "attenuation" and partial is None:
        raise InputError(f"{pair_dir}: attenuation pipeline needs fixed_partial.pgm")
    result = run_pipeline(pair.fixed, pair.moving, config.modality, config.pipeline(), partial)
    transform = {"modality": config.modality,
                 "lattice": json.loads(result.lattice.to_json()),
                 "affine": result.affine.to_dict() if result.affine is not None else None}
    fileio.atomic_write_text(out / "transform.json", _dump_json(transform))
    # the stored transform is what downstream commands use, so rebuild phi from it
    _, _, phi = _load_transform(out)
    fileio.write_image(out / "warped.lw2d", warp_image(pair.moving, phi))
    fileio.write_raster(out / "phi.lw2d", phi.grid, phi.u)
    fileio.write_image(out / "fixed.lw2d", pair.fixed)
    lines = ["stage,level,step,loss"]
    for stage, trajs in (("affine", result.affine_trajectories), ("nonrigid", result.trajectories)):
        for level, traj in enumerate(trajs):
            lines += [f"{stage},{level},{k},{float(v)!r}" for k, v in enumerate(traj)]
    fileio.atomic_write_text(out / "loss_trajectories.csv", "\n".join(lines) + "\n")
    fileio.atomic_write_text(out / "convergence.json", _dump_json(result.convergence_log()))
    fileio.atomic_write_text(out / "config.ini", dumps(config))
    timing = [f"total_s {result.duration:.3f}"] + [f"level{k}_s {d:.3f}" for k, d in enumerate(result.durations)]
    fileio.atomic_write_text(out / "timing.log", "\n".join(timing) + "\n")


def _register_job(job) -> int:
    pair_dir, out_root, config = job
    out = Path(out_root) / Path(pair_dir).name
    out.mkdir(parents=True, exist_ok=True)
    return _guard(out, _register_pair, Path(pair_dir), out, config)


def cmd_register(config: RunConfig, pairs: list, out: Path) -> int:
    jobs = [(str(p), str(out), config) for p in pairs]
    return max(_parallel(_register_job, jobs, config.workers), default=EXIT_OK)


# ----------------------------------------------------------------------------- evaluate

def _apply_toggles(report, config: RunConfig):
    drop = []
    if not config.metric_overlap:
        drop += ["dice_full", "dice_partial"]
    if not config.metric_surface:
        drop += ["msd_full", "msd_partial", "hd_full", "hd_partial"]
    if not config.metric_landmarks:
        drop += ["tre_mean"]
    if not config.metric_jacobian:
        drop += ["folding_ratio", "mmgjd"]
    for name in drop:
        setattr(report, name, None)
    return report


def _evaluate_pair(pair_dir: Path, result_dir: Path, out: Path, config: RunConfig, sink: list) -> None:
    pair = load_pair(pair_dir, config)
    if not (result_dir / "transform.json").exists():
        raise InputError(f"{result_dir}: no registration result")
    try:
        _, _, phi = _load_transform(result_dir)
    except (ValueError, KeyError) as exc:
        raise InputError(f"{result_dir}: unreadable transform: {exc}") from exc
    reports = []
    for phase, field in (("before", None), ("after", phi)):
        rep = metrics_for(phase, field, pair.fixed_masks, pair.moving_masks,
                          pair.fixed_landmarks, pair.moving_landmarks)
        reports.append(_apply_toggles(rep, config))
    fileio.atomic_write_text(out / "metrics.json", _dump_json({r.phase: r.to_dict() for r in reports}))
    sink.extend((pair.name, r) for r in reports)


def cmd_evaluate(config: RunConfig, pairs: list, results: Path, out: Path) -> int:
    code = EXIT_OK
    rows: list = []
    for pair_dir in pairs:
        pair_dir = Path(pair_dir)
        target = out / pair_dir.name
        target.mkdir(parents=True, exist_ok=True)
        code = max(code, _guard(target, _evaluate_pair, pair_dir, results / pair_dir.name,
                                target, config, rows))
    fileio.atomic_write_text(out / "metrics.csv", reports_csv(rows))
    summary = {"quantile_method": "lower", "n_pairs": len({name for name, _ in rows})}
    for phase in ("before", "after"):
        summary[phase] = aggregate([r for _, r in rows if r.phase == phase])
    fileio.atomic_write_text(out / "aggregate.json", _dump_json(summary))
    return code


# ----------------------------------------------------------------------------- analyze

def read_cohort(path) -> list[dict]:
    path = Path(path)
    try:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
    except OSError as exc:
        raise InputError(str(exc)) from exc
    needed = {"subject", "v_insp", "v_exp", "fleischner", "pair_dir"}
    if not rows or not needed <= set(rows[0]):
        raise InputError(f"{path}: cohort CSV needs columns {sorted(needed)}")
    for row in rows:
        pdir = Path(row["pair_dir"])
        row["pair_dir"] = pdir if pdir.is_absolute() else path.parent / pdir
    return rows


def _analyze_subject(row: dict, results: Path, out: Path, config: RunConfig):
    pair_dir = Path(row["pair_dir"])
    result_dir = results / pair_dir.name
    missing = [p for p in (result_dir / "warped.lw2d", result_dir / "fixed.lw2d",
                           pair_dir / "fixed_left.pgm", pair_dir / "fixed_right.pgm") if not p.exists()]
    if missing:
        return None, "missing " + ", ".join(str(p) for p in missing)
    pair = load_pair(pair_dir, config)
    warped = fileio.read_image(result_dir / "warped.lw2d")
    fixed = fileio.read_image(result_dir / "fixed.lw2d")
    ratio = analysis.ratio_image(warped, fixed, config.ratio_floor, config.modality)
    left, right = pair.fixed_masks["left"], pair.fixed_masks["right"]
    projections = [analysis.cc_projection(ratio, m, side, config.weighted_cc, config.huber_delta)
                   for side, m in (("left", left), ("right", right))]
    fields = analysis.lung_fields(ratio, left, right)
    target = out / row["subject"]
    fileio.write_raster(target / "ratio.lw2d", ratio.grid, ratio.r)
    fileio.atomic_write_text(target / "projection.csv", analysis.projection_csv(projections))
    summary = {**analysis.stats_dict(fields),
               "slope_left": projections[0].slope, "slope_right": projections[1].slope,
               "intercept_left": projections[0].intercept, "intercept_right": projections[1].intercept}
    fileio.atomic_write_text(target / "fields.json", _dump_json(summary))
    vlc = analysis.vlc_rel(float(row["v_insp"]), float(row["v_exp"]))
    record = analysis.CohortRecord(row["subject"], vlc, int(row["fleischner"]), fields.means,
                                   {p.side: p.slope for p in projections})
    return record, None


def cmd_analyze(config: RunConfig, cohort_csv, results: Path, out: Path) -> int:
    rows = read_cohort(cohort_csv)
    records, skipped = [], []
    for row in rows:
        try:
            record, reason = _analyze_subject(row, results, out, config)
        except (InputError, OSError, ValueError) as exc:
            record, reason = None, str(exc)
        if record is None:
            log.warning("skipping subject %s: %s", row["subject"], reason)
            skipped.append(f"{row['subject']}: {reason}")
        else:
            records.append(record)
    fileio.atomic_write_text(out / "skipped.txt", "".join(s + "\n" for s in skipped))
    if len(records) >= 3:
        table = analysis.cohort_table(records)
        table["metadata"]["modality"] = config.modality
        table["metadata"]["ratio_floor"] = config.ratio_floor
        fileio.atomic_write_text(out / "cohort.csv", analysis.cohort_csv(table))
        fileio.atomic_write_text(out / "cohort.json", analysis.cohort_json(table) + "\n")
    else:
        log.warning("fewer than three analysable subjects; no cohort correlations written")
    return EXIT_OK if records else EXIT_IO


# ----------------------------------------------------------------------------- sweep

def sweep_csv(rows: list[dict]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(SWEEP_COLUMNS)
    for row in rows:
        writer.writerow(["" if row[c] is None else repr(row[c]) for c in SWEEP_COLUMNS])
    return buf.getvalue()


def cmd_sweep(config: RunConfig, pairs: list, out: Path) -> int:
    try:
        loaded = [load_pair(p, config) for p in pairs]
    except InputError as exc:
        log.error("sweep input failure: %s", exc)
        _mark_failed(out, f"io: {exc}")
        return EXIT_IO
    rows = parameter_sweep(loaded, config.sweep_alphas, config.sweep_strides, config.schedule(),
                           config.workers)
    fileio.atomic_write_text(out / "sweep.csv", sweep_csv(rows))
    fileio.atomic_write_text(out / "sweep.json", _dump_json({"quantile_method": "lower", "rows": rows}))
    _clear_failed(out)
    return EXIT_OK


# ----------------------------------------------------------------------------- phantom

def _write_phantom(directory: Path, spec: PhantomSpec) -> dict:
    ph = make_phantom(spec)
    write_pair(directory, ph.fixed, ph.moving, ph.fixed_masks, ph.moving_masks,
               ph.fixed_landmarks, ph.moving_landmarks)
    ph.lattice.save(directory / "truth_lattice.json")
    fileio.write_raster(directory / "truth_phi.lw2d", ph.phi_true.grid, ph.phi_true.u)
    probes = ["x_mm,y_mm,target_x_mm,target_y_mm"]
    probes += [",".join(repr(float(v)) for v in (*p, *q)) for p, q in zip(ph.probes, ph.probe_targets)]
    fileio.atomic_write_text(directory / "probes.csv", "\n".join(probes) + "\n")
    u = ph.phi_true.u
    spec_dict = {k: (v.value if isinstance(v, IntensityModel) else v) for k, v in asdict(spec).items()}
    meta = {"spec": spec_dict, "amplitude_px": float(ph.amplitude),
            "max_displacement_px": float(np.hypot(u[0], u[1]).max() / spec.spacing)}
    fileio.atomic_write_text(directory / "meta.json", _dump_json(meta))
    from .evalmetrics import dice, tre
    area = lambda m: float(m.count) * spec.spacing ** 2  # noqa: E731
    return {"seed": spec.seed, "amplitude_px": float(ph.amplitude),
            "max_displacement_px": meta["max_displacement_px"],
            "dice_full_before": float(dice(ph.fixed_masks["full"], ph.moving_masks["full"])),
            "tre_before_mm": float(tre(ph.fixed_landmarks, ph.moving_landmarks)),
            "v_insp": area(ph.fixed_masks["partial"]), "v_exp": area(ph.moving_masks["partial"])}


def cmd_phantom(spec: PhantomSpec, out: Path, n: int | None) -> int:
    if n is None:
        _write_phantom(out, spec)
        return EXIT_OK
    truth = ["case,seed,amplitude_px,max_displacement_px,dice_full_before,tre_before_mm"]
    cohort = ["subject,v_insp,v_exp,fleischner,pair_dir"]
    for k in range(n):
        name = f"case_{k:03d}"
        row = _write_phantom(out / name, replace(spec, seed=spec.seed + k))
        truth.append(f"{name},{row['seed']},{row['amplitude_px']!r},{row['max_displacement_px']!r},"
                     f"{row['dice_full_before']!r},{row['tre_before_mm']!r}")
        cohort.append(f"{name},{row['v_insp']!r},{row['v_exp']!r},0,{name}")
    fileio.atomic_write_text(out / "truth.csv", "\n".join(truth) + "\n")
    fileio.atomic_write_text(out / "cohort.csv", "\n".join(cohort) + "\n")
    return EXIT_OK


# ----------------------------------------------------------------------------- entry point

def _setup_logging(out: Path | None, command: str) -> None:
    level_name = os.environ.get("LUNGWARP_LOG", "WARNING").upper()
    level = int(level_name) if level_name.isdigit() else getattr(logging, level_name, logging.WARNING)
    root = logging.getLogger("lungwarp")
    root.handlers.clear()
    root.setLevel(min(level, logging.INFO))
    stream = logging.StreamHandler(sys.stderr)
    stream.setLevel(level)
    stream.setFormatter(logging.Formatter("%(levelname)s %(name)s: %(message)s"))
    root.addHandler(stream)
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)
        handler = logging.FileHandler(out / f"{command}.log", mode="w")
        handler.setLevel(logging.INFO)
        handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
        root.addHandler(handler)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="run configuration (INI)")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--workers", type=int, help="parallel pairs")
    common.add_argument("--seed", type=int, help="random seed (phantom generation)")

    parser = argparse.ArgumentParser(prog="lungwarp", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("register", parents=[common], help="register pair directories")
    p.add_argument("pairs", nargs="+", type=Path)
    p = sub.add_parser("evaluate", parents=[common], help="before/after metrics")
    p.add_argument("pairs", nargs="+", type=Path)
    p.add_argument("--results", type=Path, help="registration output root (default: --out)")
    p = sub.add_parser("analyze", parents=[common], help="signal-ratio analysis of a cohort")
    p.add_argument("cohort", type=Path, help="CSV: subject,v_insp,v_exp,fleischner,pair_dir")
    p.add_argument("--results", type=Path, help="registration output root (default: --out)")
    p = sub.add_parser("sweep", parents=[common], help="alpha x stride parameter sweep")
    p.add_argument("pairs", nargs="+", type=Path)
    p = sub.add_parser("phantom", parents=[common], help="generate synthetic pairs")
    p.add_argument("--n", type=int, help="suite size (subdirectories plus truth.csv)")
    p.add_argument("--size", type=int, default=256)
    p.add_argument("--amplitude", type=float, default=15.0, help="max displacement (px)")
    p.add_argument("--stride", type=int, default=32, help="truth lattice stride (px)")
    p.add_argument("--texture-scale", type=float, default=3.0)
    p.add_argument("--model", choices=[m.value for m in IntensityModel], default="darkfield")
    return parser


def _resolve_config(args) -> RunConfig:
    if args.config is not None:
        try:
            config = load(args.config)
        except OSError as exc:
            raise ConfigError(f"cannot read config: {exc}") from exc
    else:
        config = default_config("darkfield")
    if args.workers is not None:
        config = replace(config, workers=args.workers)
    if args.seed is not None:
        config = replace(config, seed=args.seed)
    if args.out is None and not config.output_dir:
        raise ConfigError("no output directory (use --out or run.output_dir)")
    return config.validate()


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        config = _resolve_config(args)
        out = args.out or Path(config.output_dir)
        if args.command == "phantom":
            if args.n is not None and args.n < 1:
                raise ConfigError("--n must be >= 1")
            spec = PhantomSpec(size=args.size, seed=config.seed, texture_scale=args.texture_scale,
                               amplitude=args.amplitude, stride=args.stride, model=args.model)
    except (ConfigError, ValueError) as exc:
        print(f"lungwarp: configuration error: {exc}", file=sys.stderr)
        if args.out is not None:
            _mark_failed(args.out, f"config: {exc}")
        return EXIT_CONFIG
    _setup_logging(out, args.command)
    results = getattr(args, "results", None) or out
    try:
        if args.command == "register":
            return cmd_register(config, args.pairs, out)
        if args.command == "evaluate":
            return cmd_evaluate(config, args.pairs, results, out)
        if args.command == "analyze":
            return cmd_analyze(config, args.cohort, results, out)
        if args.command == "sweep":
            return cmd_sweep(config, args.pairs, out)
        return cmd_phantom(spec, out, args.n)
    except InputError as exc:
        log.error("%s", exc)
        _mark_failed(out, f"io: {exc}")
        return EXIT_IO
    except OptimizationAborted as exc:
        log.error("%s", exc)
        _mark_failed(out, f"aborted: {exc}")
        return EXIT_ABORTED
    finally:
        for handler in list(logging.getLogger("lungwarp").handlers):
            handler.close()


if __name__ == "__main__":
    sys.exit(main())
