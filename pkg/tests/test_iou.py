import numpy as np
import pytest

from voxdet.geometry import OrientedBox
from voxdet.iou import (
    bev_intersection_polygon,
    iou3d,
    iou3d_batch,
    iou3d_grad,
    shoelace_area,
    to_frame,
)
from voxdet.verification import (
    OracleConfig,
    bev_rect,
    clip_polygons,
    dedupe_vertices,
    finite_diff,
    mc_iou3d,
    polygon_area,
)

OCTAGON_AREA = 2.0 * (np.sqrt(2.0) - 1.0)


def _random_pair(rng, max_offset=3.0):
    dims = rng.uniform(0.5, 5.0, 6)
    off = rng.uniform(-max_offset, max_offset, 3)
    yaws = rng.uniform(-np.pi, np.pi, 2)
    return (
        OrientedBox(0, 0, 0, dims[0], dims[1], dims[2], yaws[0]),
        OrientedBox(off[0], off[1], off[2], dims[3], dims[4], dims[5], yaws[1]),
    )


class TestToFrame:
    def test_identity(self):
        b = OrientedBox(1, 2, 0, 2, 3, 1, 0.7)
        pts = np.array([[0.3, -0.4], [1.0, 1.0]])
        assert np.allclose(to_frame(pts, b, b), pts, atol=1e-12)

    def test_pure_translation(self):
        a = OrientedBox(0, 0, 0, 2, 3, 1, 0.5)
        b = OrientedBox(1, -2, 0, 2, 3, 1, 0.5)
        pts = np.array([[0.0, 0.0]])
        got = to_frame(pts, a, b)
        c, s = np.cos(0.5), np.sin(0.5)
        want = np.array([[c * (-1) + s * 2, -s * (-1) + c * 2]])
        assert np.allclose(got, want, atol=1e-12)

    def test_round_trip(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = _random_pair(rng)
            pts = rng.uniform(-3, 3, (5, 2))
            back = to_frame(to_frame(pts, a, b), b, a)
            assert np.allclose(back, pts, atol=1e-9)


class TestPolygon:
    def test_identical_squares(self):
        b = OrientedBox(0, 0, 0, 1, 1, 1, 0)
        poly = bev_intersection_polygon(b, b)
        assert len(poly) == 4
        corners = {(round(x, 9), round(y, 9)) for x, y in poly}
        assert corners == {(-0.5, 0.5), (-0.5, -0.5), (0.5, -0.5), (0.5, 0.5)}

    def test_disjoint_empty(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, 0)
        b = OrientedBox(10, 0, 0, 1, 1, 1, 0)
        assert len(bev_intersection_polygon(a, b)) == 0

    def test_rotated_square_octagon(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, 0)
        b = OrientedBox(0, 0, 0, 1, 1, 1, np.pi / 4)
        poly = bev_intersection_polygon(a, b)
        assert len(poly) == 8
        # verified against the independent convex-clipping oracle
        oracle = dedupe_vertices(clip_polygons(bev_rect(a), bev_rect(b)))
        assert len(oracle) == 8
        assert shoelace_area(poly) == pytest.approx(polygon_area(oracle), abs=1e-12)

    def test_counterclockwise_output(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            a, b = _random_pair(rng, max_offset=1.5)
            poly = bev_intersection_polygon(a, b)
            if len(poly) < 3:
                continue
            signed = 0.0
            for i in range(len(poly)):
                x0, y0 = poly[i]
                x1, y1 = poly[(i + 1) % len(poly)]
                signed += x0 * y1 - x1 * y0
            assert signed > 0

    def test_area_against_clip_oracle_sweep(self):
        rng = np.random.default_rng(2)
        for _ in range(1000):
            a, b = _random_pair(rng)
            mine = shoelace_area(bev_intersection_polygon(a, b))
            ref = polygon_area(clip_polygons(bev_rect(a), bev_rect(b)))
            assert abs(mine - ref) < 1e-7


class TestShoelace:
    def test_unit_square(self):
        sq = [(0, 0), (1, 0), (1, 1), (0, 1)]
        assert shoelace_area(sq) == pytest.approx(1.0)

    def test_degenerate(self):
        assert shoelace_area([]) == 0.0
        assert shoelace_area([(0, 0), (1, 1)]) == 0.0

    def test_octagon_value(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, 0)
        b = OrientedBox(0, 0, 0, 1, 1, 1, np.pi / 4)
        area = shoelace_area(bev_intersection_polygon(a, b))
        assert area == pytest.approx(OCTAGON_AREA, abs=1e-12)
        # Monte Carlo cross-check through unit-height boxes (volume == area)
        est, _ = mc_iou3d(a, b, OracleConfig(samples=200_000, seed=3))
        union = 2.0 - area
        assert est == pytest.approx(area / union, abs=2e-3)


class TestIou3d:
    def test_identical(self):
        b = OrientedBox(0.5, -1, 2, 1.5, 2.5, 1.1, 0.9)
        r = iou3d(b, b)
        assert r.iou3d == 1.0
        assert r.loss == 0.0

    def test_axis_aligned_third(self):
        r = iou3d(OrientedBox(0, 0, 0, 2, 2, 2, 0), OrientedBox(1, 0, 0, 2, 2, 2, 0))
        assert r.iou3d == pytest.approx(1.0 / 3.0, abs=1e-12)
        assert r.bev_area == pytest.approx(2.0)
        assert r.height_overlap == pytest.approx(2.0)

    def test_rotated_cube_value(self):
        r = iou3d(OrientedBox(0, 0, 0, 1, 1, 1, 0), OrientedBox(0, 0, 0, 1, 1, 1, np.pi / 4))
        want = OCTAGON_AREA / (2.0 - OCTAGON_AREA)
        assert r.iou3d == pytest.approx(want, abs=1e-9)
        assert r.iou3d == pytest.approx(0.70711, abs=1e-3)

    def test_symmetry(self):
        rng = np.random.default_rng(4)
        for _ in range(300):
            a, b = _random_pair(rng)
            assert abs(iou3d(a, b).iou3d - iou3d(b, a).iou3d) < 1e-9

    def test_rigid_invariance(self):
        rng = np.random.default_rng(5)
        for _ in range(100):
            a, b = _random_pair(rng, max_offset=1.5)
            base = iou3d(a, b).iou3d
            ang = rng.uniform(-np.pi, np.pi)
            t = rng.uniform(-10, 10, 3)
            c, s = np.cos(ang), np.sin(ang)

            def move(bx):
                x = c * bx.x - s * bx.y + t[0]
                y = s * bx.x + c * bx.y + t[1]
                return OrientedBox(x, y, bx.z + t[2], bx.w, bx.l, bx.h, bx.r + ang)

            assert abs(iou3d(move(a), move(b)).iou3d - base) < 1e-7

    def test_yaw_period_and_flip(self):
        rng = np.random.default_rng(6)
        a, b = _random_pair(rng, max_offset=0.5)
        base = iou3d(a, b).iou3d
        b2 = OrientedBox(b.x, b.y, b.z, b.w, b.l, b.h, b.r + 2 * np.pi)
        assert abs(iou3d(a, b2).iou3d - base) < 1e-9
        # adding pi to a w != l box changes the overlap
        wide = OrientedBox(0, 0, 0, 1, 3, 1, 0)
        partner = OrientedBox(0.4, 0.2, 0, 1, 3, 1, 0.3)
        flipped = OrientedBox(0.4, 0.2, 0, 1, 3, 1, 0.3 + np.pi)
        assert iou3d(wide, partner).iou3d == pytest.approx(iou3d(wide, flipped).iou3d, abs=1e-9)
        asym = OrientedBox(0.4, 0.2, 0, 1, 3, 1, np.pi / 2)
        assert abs(iou3d(wide, partner).iou3d - iou3d(wide, asym).iou3d) > 1e-3

    def test_containment(self):
        outer = OrientedBox(0, 0, 0, 4, 4, 4, 0.3)
        inner = OrientedBox(0.2, -0.1, 0.5, 1, 2, 1, -0.8)
        r = iou3d(outer, inner)
        assert r.iou3d == pytest.approx(inner.volume / outer.volume, abs=1e-9)

    def test_range_and_area_bound(self):
        rng = np.random.default_rng(7)
        for _ in range(500):
            a, b = _random_pair(rng)
            r = iou3d(a, b)
            assert 0.0 <= r.iou3d <= 1.0
            assert r.loss == pytest.approx(1.0 - r.iou3d)
            assert r.bev_area <= min(a.w * a.l, b.w * b.l) + 1e-9

    def test_against_monte_carlo(self):
        rng = np.random.default_rng(8)
        for i in range(20):
            a, b = _random_pair(rng, max_offset=1.5)
            est, _ = mc_iou3d(a, b, OracleConfig(samples=200_000, seed=100 + i))
            assert abs(iou3d(a, b).iou3d - est) < 5e-3


class TestGradient:
    def test_identical_boxes_center_gradient_zero(self):
        b = OrientedBox(0, 0, 0, 2, 2, 2, 0)
        g = iou3d_grad(b, b)
        assert g.loss == pytest.approx(0.0, abs=1e-12)
        assert g.gradient[0] == pytest.approx(0.0, abs=1e-9)

    def test_axis_aligned_center_gradient(self):
        a = OrientedBox(0, 0, 0, 2, 2, 2, 0)
        b = OrientedBox(1, 0, 0, 2, 2, 2, 0)
        g = iou3d_grad(a, b)
        assert g.gradient[0] == pytest.approx(-4.0 / 9.0, abs=1e-12)

        def f(v):
            return iou3d(OrientedBox(*v[:7]), OrientedBox(*v[7:])).loss

        fd = finite_diff(f, np.concatenate([a.as_array(), b.as_array()]), 1e-5)
        assert abs(g.gradient[0] - fd[0]) / max(abs(fd[0]), 1e-6) < 1e-4

    def test_random_pairs_match_finite_differences(self):
        rng = np.random.default_rng(9)
        checked = flagged = 0
        for _ in range(300):
            a, b = _random_pair(rng)
            g = iou3d_grad(a, b)
            if not g.smooth:
                flagged += 1
                continue
            checked += 1

            def f(v):
                return iou3d(OrientedBox(*v[:7]), OrientedBox(*v[7:])).loss

            fd = finite_diff(f, np.concatenate([a.as_array(), b.as_array()]), 1e-5)
            err = np.max(np.abs(g.gradient - fd)) / max(np.max(np.abs(fd)), 1e-6)
            assert err < 1e-3
        assert flagged < 0.02 * 300
        assert checked > 200


class TestBatch:
    def test_matches_scalar(self):
        rng = np.random.default_rng(10)
        n = 400
        bp = np.zeros((n, 7))
        bg = np.zeros((n, 7))
        for i in range(n):
            a, b = _random_pair(rng)
            bp[i] = a.as_array()
            bg[i] = b.as_array()
        res = iou3d_batch(bp, bg)
        for i in range(n):
            s = iou3d(OrientedBox(*bp[i]), OrientedBox(*bg[i]))
            assert res["iou"][i] == pytest.approx(s.iou3d, abs=1e-12)
            assert res["bev_area"][i] == pytest.approx(s.bev_area, abs=1e-12)
            assert res["height_overlap"][i] == pytest.approx(s.height_overlap, abs=1e-12)
            nv = len(s.polygon)
            assert res["n_vertices"][i] == nv or (nv < 3 and res["n_vertices"][i] < 3)

    def test_empty_and_shape_checks(self):
        out = iou3d_batch(np.zeros((0, 7)), np.zeros((0, 7)))
        assert len(out["iou"]) == 0
        with pytest.raises(ValueError):
            iou3d_batch(np.zeros((2, 7)), np.zeros((3, 7)))
