import numpy as np
import pytest

from lungwarp import fileio
from lungwarp.imaging import LANDMARK_LABELS, BinaryMask, Grid2D, Image2D, LandmarkSet, MaskKind


def test_raster_roundtrip(tmp_path, rng):
    grid = Grid2D(7, 5, 1.66, (0.5, -2.0))
    values = rng.random((5, 7)).astype(np.float32).astype(float)
    fileio.write_image(tmp_path / "a.lw2d", Image2D(grid, values))
    back = fileio.read_image(tmp_path / "a.lw2d")
    assert back.grid == grid
    np.testing.assert_array_equal(back.values, values)


def test_header_layout(tmp_path):
    fileio.write_image(tmp_path / "a.lw2d", Image2D(Grid2D(2, 3, 1.5), np.zeros((3, 2))))
    data = (tmp_path / "a.lw2d").read_bytes()
    header, payload = data.split(b"\n", 1)
    assert header.split() == [b"LW2D", b"2", b"3", b"1.5", b"0.0", b"0.0", b"f32"]
    assert len(payload) == 6 * 4


def test_vector_raster_roundtrip(tmp_path, rng):
    grid = Grid2D(4, 3)
    u = rng.random((2, 3, 4)).astype(np.float32).astype(float)
    fileio.write_raster(tmp_path / "u.lw2d", grid, u)
    g, back = fileio.read_raster(tmp_path / "u.lw2d")
    np.testing.assert_array_equal(back, u)


def test_truncated_raster_rejected(tmp_path):
    (tmp_path / "b.lw2d").write_bytes(b"LW2D 4 4 1.0 0.0 0.0 f32\n" + b"\0" * 10)
    with pytest.raises(ValueError):
        fileio.read_raster(tmp_path / "b.lw2d")


def test_pgm_mask_threshold(tmp_path):
    data = np.array([[0, 127], [128, 255]], dtype=np.uint8)
    (tmp_path / "m.pgm").write_bytes(b"P5\n# comment\n2 2\n255\n" + data.tobytes())
    m = fileio.read_mask(tmp_path / "m.pgm")
    np.testing.assert_array_equal(m.values, [[False, False], [True, True]])


def test_pgm_roundtrip(tmp_path, rng):
    grid = Grid2D(6, 4, 2.0)
    mask = BinaryMask(grid, rng.random((4, 6)) > 0.5, MaskKind.PARTIAL)
    fileio.write_pgm(tmp_path / "m.pgm", mask)
    back = fileio.read_mask(tmp_path / "m.pgm", grid, MaskKind.PARTIAL)
    np.testing.assert_array_equal(back.values, mask.values)
    with pytest.raises(ValueError):
        fileio.read_mask(tmp_path / "m.pgm", Grid2D(5, 4))


def test_landmark_roundtrip(tmp_path, rng):
    lms = LandmarkSet(rng.random((6, 2)) * 100, LANDMARK_LABELS)
    fileio.write_landmarks(tmp_path / "l.csv", lms)
    back = fileio.read_landmarks(tmp_path / "l.csv")
    np.testing.assert_array_equal(back.ordered(), lms.ordered())


def test_atomic_write_leaves_no_temp_files(tmp_path):
    fileio.atomic_write_text(tmp_path / "x.txt", "hello")
    assert [p.name for p in tmp_path.iterdir()] == ["x.txt"]
