import numpy as np
import pytest

from voxdet.geometry import OrientedBox, PointCloud
from voxdet.verification import (
    OracleConfig,
    bev_rect,
    brute_neighbors,
    brute_voxelize,
    clip_polygons,
    dedupe_vertices,
    finite_diff,
    mc_iou3d,
    polygon_area,
    run_verify_suite,
)

OCTAGON_AREA = 2.0 * (np.sqrt(2.0) - 1.0)


class TestMcIou:
    def test_identical_boxes(self):
        b = OrientedBox(0, 0, 0, 2, 3, 1, 0.4)
        est, se = mc_iou3d(b, b, OracleConfig(samples=20_000))
        assert est == 1.0 and se == 0.0

    def test_disjoint(self):
        a = OrientedBox(0, 0, 0, 1, 1, 1, 0)
        b = OrientedBox(20, 0, 0, 1, 1, 1, 0.3)
        est, se = mc_iou3d(a, b, OracleConfig(samples=20_000))
        assert est == 0.0 and se == 0.0

    def test_axis_aligned_analytic(self):
        a = OrientedBox(0, 0, 0, 2, 2, 2, 0)
        b = OrientedBox(1, 0, 0, 2, 2, 2, 0)
        est, se = mc_iou3d(a, b, OracleConfig(samples=1_000_000, seed=5))
        assert abs(est - 1.0 / 3.0) < 1e-3
        assert se < 1e-3

    def test_standard_error_scales_as_inverse_sqrt(self):
        a = OrientedBox(0, 0, 0, 2, 2, 2, 0.2)
        b = OrientedBox(0.8, 0.3, 0.1, 2, 2, 2, -0.4)
        _, se1 = mc_iou3d(a, b, OracleConfig(samples=10_000, seed=3))
        _, se2 = mc_iou3d(a, b, OracleConfig(samples=1_000_000, seed=3))
        ratio = se1 / se2
        assert 5.0 < ratio < 20.0  # expect ~10 for a 100x sample increase

    def test_reproducible_per_seed(self):
        a = OrientedBox(0, 0, 0, 2, 2, 2, 0.2)
        b = OrientedBox(0.8, 0.3, 0.1, 2, 2, 2, -0.4)
        r1 = mc_iou3d(a, b, OracleConfig(samples=50_000, seed=11))
        r2 = mc_iou3d(a, b, OracleConfig(samples=50_000, seed=11))
        assert r1 == r2

    def test_config_validation(self):
        with pytest.raises(ValueError):
            OracleConfig(samples=0)


class TestClipPolygons:
    def test_identical_squares(self):
        sq = bev_rect(OrientedBox(0, 0, 0, 1, 1, 1, 0))
        out = dedupe_vertices(clip_polygons(sq, sq))
        assert len(out) == 4
        assert polygon_area(out) == pytest.approx(1.0)

    def test_octagon(self):
        a = bev_rect(OrientedBox(0, 0, 0, 1, 1, 1, 0))
        b = bev_rect(OrientedBox(0, 0, 0, 1, 1, 1, np.pi / 4))
        out = clip_polygons(a, b)
        assert polygon_area(out) == pytest.approx(OCTAGON_AREA, abs=1e-12)
        assert len(dedupe_vertices(out)) == 8

    def test_commutative_area(self):
        rng = np.random.default_rng(0)
        for _ in range(200):
            b1 = OrientedBox(0, 0, 0, *rng.uniform(0.5, 4, 3), rng.uniform(-np.pi, np.pi))
            b2 = OrientedBox(
                *rng.uniform(-2, 2, 2), 0, *rng.uniform(0.5, 4, 3), rng.uniform(-np.pi, np.pi)
            )
            a12 = polygon_area(clip_polygons(bev_rect(b1), bev_rect(b2)))
            a21 = polygon_area(clip_polygons(bev_rect(b2), bev_rect(b1)))
            assert abs(a12 - a21) < 1e-12

    def test_disjoint(self):
        a = bev_rect(OrientedBox(0, 0, 0, 1, 1, 1, 0))
        b = bev_rect(OrientedBox(5, 0, 0, 1, 1, 1, 0))
        assert len(clip_polygons(a, b)) == 0


class TestBruteForce:
    def test_zero_radius_self_only(self):
        pts = np.array([[0.0, 0.0, 0.0], [1.0, 0.0, 0.0]])
        cloud = PointCloud(pts, np.zeros((2, 0)))
        assert brute_neighbors(cloud, (0, 0, 0), 0.0).tolist() == [0]

    def test_empty_cloud(self):
        cloud = PointCloud.empty(2)
        assert len(brute_neighbors(cloud, (0, 0, 0), 5.0)) == 0
        t = brute_voxelize(cloud, (0, 0, 0), 1.0, 3)
        assert np.all(t.data == 0)

    def test_inclusive_boundary(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 0)))
        assert brute_neighbors(cloud, (0, 0, 0), 1.0).tolist() == [0]

    def test_voxelize_cap(self):
        pts = np.array([[0.01 * i, 0.0, 0.0] for i in range(4)])
        cloud = PointCloud(pts, np.arange(4, dtype=np.float64).reshape(-1, 1))
        t = brute_voxelize(cloud, (0, 0, 0), 0.5, 3, cap=2)
        assert t.data[1, 1, 1, 0] == pytest.approx(0.5)


class TestFiniteDiff:
    def test_square(self):
        g = finite_diff(lambda v: v[0] ** 2, np.array([3.0]), 1e-5)
        assert g[0] == pytest.approx(6.0, abs=1e-8)

    def test_constant(self):
        g = finite_diff(lambda v: 7.0, np.array([1.0, 2.0]), 1e-5)
        assert np.all(g == 0.0)

    def test_multivariate(self):
        g = finite_diff(lambda v: v[0] * v[1] + np.sin(v[1]), np.array([2.0, 0.5]))
        assert g[0] == pytest.approx(0.5, abs=1e-8)
        assert g[1] == pytest.approx(2.0 + np.cos(0.5), abs=1e-8)


def test_dedupe_vertices():
    v = np.array([[0.0, 0.0], [0.0, 5e-8], [1.0, 0.0], [1.0, 0.0]])
    out = dedupe_vertices(v)
    assert len(out) == 2


def test_suite_runs_clean():
    results = run_verify_suite(samples=20_000, seed=0, pairs=10)
    assert all(ok for _, ok, _ in results), results
