import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from lungwarp.evalmetrics import (METRIC_FIELDS, MetricsReport, aggregate, boundary, dice,
                                  full_report, is_finite_report, lower_quantile, metrics_for,
                                  point_errors, surface_distances, tre, warp_mask)
from lungwarp.imaging import LANDMARK_LABELS, BinaryMask, Grid2D, LandmarkSet
from lungwarp.transform import DisplacementField


def mask(values, spacing=1.0):
    values = np.asarray(values, bool)
    return BinaryMask(Grid2D(values.shape[1], values.shape[0], spacing), values)


def brute_boundary(v):
    h, w = v.shape
    out = np.zeros_like(v)
    for y in range(h):
        for x in range(w):
            if not v[y, x]:
                continue
            for dy, dx in ((1, 0), (-1, 0), (0, 1), (0, -1)):
                yy, xx = y + dy, x + dx
                if not (0 <= yy < h and 0 <= xx < w) or not v[yy, xx]:
                    out[y, x] = True
    return out


def brute_surface(a, b, spacing):
    pa = np.argwhere(brute_boundary(a)) * spacing
    pb = np.argwhere(brute_boundary(b)) * spacing
    d = np.sqrt(((pa[:, None, :] - pb[None, :, :]) ** 2).sum(-1))
    da, db = d.min(1), d.min(0)
    return 0.5 * (da.mean() + db.mean()), max(da.max(), db.max())


def random_blob(rng, n=12):
    v = rng.random((n, n)) < 0.35
    v[rng.integers(n), rng.integers(n)] = True
    return v


class TestDice:
    def test_examples(self):
        a = np.zeros((6, 6), bool)
        a[1:3, 1:3] = True
        b = np.zeros((6, 6), bool)
        b[1:3, 2:4] = True
        c = np.zeros((6, 6), bool)
        c[4:, 4:] = True
        assert dice(mask(a), mask(a)) == 1.0
        assert dice(mask(a), mask(c)) == 0.0
        assert dice(mask(a), mask(b)) == 0.5

    def test_brute_force(self, rng):
        for _ in range(50):
            a, b = random_blob(rng), random_blob(rng)
            inter = sum(1 for y in range(12) for x in range(12) if a[y, x] and b[y, x])
            expect = 2 * inter / (a.sum() + b.sum())
            assert abs(dice(mask(a), mask(b)) - expect) < 1e-12
            assert dice(mask(a), mask(b)) == dice(mask(b), mask(a))

    def test_empty_rejected(self):
        with pytest.raises(ValueError):
            dice(mask(np.zeros((3, 3))), mask(np.ones((3, 3))))


class TestSurface:
    def test_identical(self, rng):
        a = random_blob(rng)
        assert surface_distances(mask(a), mask(a)) == (0.0, 0.0)

    def test_two_points(self):
        a = np.zeros((10, 10), bool)
        b = np.zeros((10, 10), bool)
        a[2, 2] = True
        b[2, 7] = True
        msd, hd = surface_distances(mask(a, 1.66), mask(b, 1.66))
        assert msd == pytest.approx(8.3, abs=1e-12) and hd == pytest.approx(8.3, abs=1e-12)

    def test_concentric_squares(self):
        a = np.zeros((20, 20), bool)
        a[2:18, 2:18] = True
        b = np.zeros((20, 20), bool)
        b[6:14, 6:14] = True
        got = surface_distances(mask(a, 0.7), mask(b, 0.7))
        np.testing.assert_allclose(got, brute_surface(a, b, 0.7), atol=1e-9)

    def test_boundary_matches_enumeration(self, rng):
        for _ in range(20):
            a = random_blob(rng)
            assert np.array_equal(boundary(a), brute_boundary(a))

    def test_random_oracle_and_order(self, rng):
        for _ in range(30):
            a, b = random_blob(rng), random_blob(rng)
            msd, hd = surface_distances(mask(a, 1.3), mask(b, 1.3))
            np.testing.assert_allclose((msd, hd), brute_surface(a, b, 1.3), atol=1e-9)
            assert msd <= hd

    def test_spacing_scales_linearly(self, rng):
        a, b = random_blob(rng), random_blob(rng)
        one = np.array(surface_distances(mask(a, 1.0), mask(b, 1.0)))
        two = np.array(surface_distances(mask(a, 2.0), mask(b, 2.0)))
        assert np.array_equal(two, 2 * one)


def landmarks(points):
    return LandmarkSet(points, LANDMARK_LABELS)


class TestTRE:
    def test_examples(self, rng):
        p = rng.random((6, 2)) * 50
        assert tre(landmarks(p), landmarks(p)) == 0.0
        assert tre(landmarks(p), landmarks(p + [3.0, 4.0])) == pytest.approx(5.0, abs=1e-12)

    def test_label_order_ignored(self, rng):
        p = rng.random((6, 2))
        shuffled = LandmarkSet(p[::-1], LANDMARK_LABELS[::-1])
        assert tre(landmarks(p), shuffled) == 0.0

    def test_point_errors_with_field(self):
        grid = Grid2D(8, 8, 1.0)
        phi = DisplacementField(grid, np.stack([np.full((8, 8), 1.0), np.zeros((8, 8))]))
        err = point_errors(phi, np.array([[2.0, 3.0]]), np.array([[3.0, 3.0]]))
        assert err[0] == pytest.approx(0, abs=1e-12)

    def test_forward_and_inverse_agree(self, rng):
        # forward: |phi(p) - q|; backward: |phi^-1(q) - p|, with a perturbed target set
        from lungwarp.transform import VelocityLattice, invert_svf, lattice_exp, lattice_shape
        grid = Grid2D(64, 64, 1.66)
        lat = VelocityLattice(grid, 8, rng.uniform(-3, 3, (2, *lattice_shape(grid, 8))))
        phi = lattice_exp(lat)
        p = rng.uniform(25, 80, size=(6, 2))
        q = phi(p) + rng.normal(0, 1.0, size=(6, 2))
        forward = tre(landmarks(p), landmarks(q), phi)
        backward = float(np.linalg.norm(invert_svf(lat)(q) - p, axis=1).mean())
        # the two differ by the local Jacobian; for mild fields they agree closely
        assert forward == pytest.approx(backward, rel=0.15)
        q = phi(p)
        assert tre(landmarks(p), landmarks(q), phi) < 1e-9
        assert np.linalg.norm(invert_svf(lat)(q) - p, axis=1).max() < 0.1 * grid.spacing


class TestWarpMask:
    def test_identity_and_integer_shift(self, rng):
        a = random_blob(rng, 16)
        grid = Grid2D(16, 16)
        assert np.array_equal(warp_mask(mask(a), DisplacementField.identity(grid)).values, a)
        u = np.stack([np.full((16, 16), 2.0), np.zeros((16, 16))])
        out = warp_mask(mask(a), DisplacementField(grid, u)).values
        assert np.array_equal(out[:, :-2], a[:, 2:])
        assert not out[:, -2:].any()

    def test_half_pixel_line(self):
        a = np.zeros((8, 8), bool)
        a[:, 3] = True
        u = np.stack([np.full((8, 8), 0.5), np.zeros((8, 8))])
        out = warp_mask(mask(a), DisplacementField(Grid2D(8, 8), u)).values
        # sample at x + 0.5 sees 0.5 at columns 2 and 3 -> kept
        expect = np.zeros((8, 8), bool)
        expect[:, 2:4] = True
        assert np.array_equal(out, expect)


class TestReports:
    def _masks(self, rng):
        a = np.zeros((24, 24), bool)
        a[4:18, 5:19] = True
        b = np.roll(a, 2, axis=1)
        grid = Grid2D(24, 24, 1.66)
        fm = {"full": BinaryMask(grid, a), "partial": BinaryMask(grid, a)}
        mm = {"full": BinaryMask(grid, b), "partial": BinaryMask(grid, b)}
        return grid, fm, mm

    def test_shape_and_identity(self, rng):
        grid, fm, mm = self._masks(rng)
        p = rng.random((6, 2)) * 20
        before, after = full_report(fm, mm, landmarks(p), landmarks(p), DisplacementField.identity(grid))
        assert len(METRIC_FIELDS) * 2 == 18
        for name in METRIC_FIELDS:
            assert getattr(before, name) == pytest.approx(getattr(after, name), abs=1e-12)
        assert after.folding_ratio == 0.0 and after.mmgjd == pytest.approx(0, abs=1e-12)

    def test_recovering_shift_improves(self, rng):
        grid, fm, mm = self._masks(rng)
        u = np.stack([np.full((24, 24), 2 * 1.66), np.zeros((24, 24))])
        before, after = full_report(fm, mm, None, None, DisplacementField(grid, u))
        assert before.dice_full < 1.0 and after.dice_full == 1.0
        assert before.tre_mean is None and after.tre_mean is None

    def test_missing_annotations_null(self, rng):
        grid, fm, mm = self._masks(rng)
        rep = metrics_for("after", None, {"full": fm["full"]}, {"full": mm["full"]}, None, None)
        assert rep.dice_partial is None and rep.tre_mean is None and rep.dice_full is not None
        assert is_finite_report(rep)
        assert MetricsReport.from_dict(rep.to_dict()) == rep


class TestAggregate:
    def test_median_matches_sort(self, rng):
        reports = [MetricsReport("after", dice_full=float(x)) for x in rng.random(11)]
        agg = aggregate(reports)
        vals = sorted(r.dice_full for r in reports)
        assert agg["dice_full"]["median"] == vals[5]
        assert agg["dice_full"]["n"] == 11 and agg["msd_full"] is None

    @settings(max_examples=50, deadline=None)
    @given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=30), st.sampled_from([0.25, 0.5, 0.75]))
    def test_lower_quantile(self, values, q):
        s = sorted(values)
        k = int(np.floor(q * (len(s) - 1)))
        assert lower_quantile(values, q) == s[k]
