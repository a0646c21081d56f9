"""File formats: LW2D rasters, PGM masks, landmark CSVs.

LW2D is a one-line text header ``LW2D <width> <height> <spacing> <origin-x>
<origin-y> <dtype>`` followed by row-major little-endian float32 data. The
``f32x2`` dtype stores interleaved (x, y) vectors per pixel.
"""

from __future__ import annotations

import csv
import os
import tempfile
from pathlib import Path

import numpy as np

from .imaging import BinaryMask, Grid2D, Image2D, LandmarkSet, MaskKind

MAGIC = "LW2D"


def atomic_write_bytes(path, data: bytes) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "wb") as fh:
            fh.write(data)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def atomic_write_text(path, text: str) -> None:
    atomic_write_bytes(path, text.encode("utf-8"))


def _header(grid: Grid2D, dtype: str) -> bytes:
    return (f"{MAGIC} {grid.width} {grid.height} {grid.spacing!r} "
            f"{grid.origin[0]!r} {grid.origin[1]!r} {dtype}\n").encode("ascii")


def encode_raster(grid: Grid2D, values: np.ndarray) -> bytes:
    values = np.asarray(values)
    if values.shape == grid.shape:
        dtype = "f32"
    elif values.shape == (2, *grid.shape):
        dtype = "f32x2"
        values = np.moveaxis(values, 0, -1)
    else:
        raise ValueError(f"raster shape {values.shape} incompatible with grid {grid.shape}")
    return _header(grid, dtype) + np.ascontiguousarray(values, dtype="<f4").tobytes()


def write_raster(path, grid: Grid2D, values: np.ndarray) -> None:
    atomic_write_bytes(path, encode_raster(grid, values))


def read_raster(path) -> tuple[Grid2D, np.ndarray]:
    """Returns the grid and a float64 array (``(H, W)`` or ``(2, H, W)``)."""
    data = Path(path).read_bytes()
    newline = data.find(b"\n")
    if newline < 0:
        raise ValueError(f"{path}: missing LW2D header")
    fields = data[:newline].decode("ascii").split()
    if len(fields) != 7 or fields[0] != MAGIC:
        raise ValueError(f"{path}: malformed LW2D header {fields!r}")
    width, height = int(fields[1]), int(fields[2])
    grid = Grid2D(width, height, float(fields[3]), (float(fields[4]), float(fields[5])))
    dtype = fields[6]
    ncomp = {"f32": 1, "f32x2": 2}.get(dtype)
    if ncomp is None:
        raise ValueError(f"{path}: unsupported dtype {dtype}")
    raw = np.frombuffer(data[newline + 1:], dtype="<f4")
    if raw.size != width * height * ncomp:
        raise ValueError(f"{path}: expected {width * height * ncomp} values, found {raw.size}")
    values = raw.astype(np.float64)
    if ncomp == 1:
        return grid, values.reshape(height, width)
    return grid, np.moveaxis(values.reshape(height, width, 2), -1, 0)


def write_image(path, img: Image2D) -> None:
    write_raster(path, img.grid, img.values)


def read_image(path) -> Image2D:
    grid, values = read_raster(path)
    if values.ndim != 2:
        raise ValueError(f"{path}: expected a scalar raster")
    return Image2D(grid, values)


def write_pgm(path, mask: BinaryMask) -> None:
    h, w = mask.grid.shape
    payload = f"P5\n{w} {h}\n255\n".encode("ascii") + (mask.values.astype(np.uint8) * 255).tobytes()
    atomic_write_bytes(path, payload)


def _pgm_tokens(data: bytes):
    """Yield header tokens and finally the payload offset."""
    pos = 0
    tokens = []
    while len(tokens) < 4:
        while data[pos:pos + 1].isspace():
            pos += 1
        if data[pos:pos + 1] == b"#":
            pos = data.index(b"\n", pos) + 1
            continue
        start = pos
        while not data[pos:pos + 1].isspace():
            pos += 1
        tokens.append(data[start:pos].decode("ascii"))
    return tokens, pos + 1


def read_mask(path, grid: Grid2D | None = None, kind=MaskKind.FULL) -> BinaryMask:
    """Reads a PGM (P5, threshold > 127) or LW2D (> 0.5) mask."""
    path = Path(path)
    data = path.read_bytes()
    if data[:2] == b"P5":
        tokens, offset = _pgm_tokens(data)
        w, h, maxval = int(tokens[1]), int(tokens[2]), int(tokens[3])
        if maxval > 255:
            raise ValueError(f"{path}: only 8-bit PGM supported")
        pixels = np.frombuffer(data[offset:offset + w * h], dtype=np.uint8)
        if pixels.size != w * h:
            raise ValueError(f"{path}: truncated PGM payload")
        values = pixels.reshape(h, w) > 127
        if grid is None:
            grid = Grid2D(w, h)
        elif grid.shape != (h, w):
            raise ValueError(f"{path}: mask {w}x{h} does not match image grid")
        return BinaryMask(grid, values, kind)
    mgrid, values = read_raster(path)
    if grid is not None and grid.shape != mgrid.shape:
        raise ValueError(f"{path}: mask does not match image grid")
    return BinaryMask(grid or mgrid, values > 0.5, kind)


def write_landmarks(path, lms: LandmarkSet) -> None:
    lines = ["label,x_mm,y_mm"]
    lines += [f"{lab},{float(x)!r},{float(y)!r}" for lab, (x, y) in zip(lms.labels, lms.points)]
    atomic_write_text(path, "\n".join(lines) + "\n")


def read_landmarks(path) -> LandmarkSet:
    with open(path, newline="") as fh:
        rows = list(csv.DictReader(fh))
    if not rows or set(rows[0]) != {"label", "x_mm", "y_mm"}:
        raise ValueError(f"{path}: expected columns label,x_mm,y_mm")
    return LandmarkSet([[float(r["x_mm"]), float(r["y_mm"])] for r in rows],
                       [r["label"] for r in rows])
