import math

import numpy as np
import pytest

from voxdet.geometry import OrientedBox, PointCloud
from voxdet.roipool import (
    PooledRoi,
    RefineHeadWeights,
    RoiPoolConfig,
    conv3d_valid,
    init_refine_head,
    la_pool,
    location_weight,
    points_in_box,
    refine_head,
    refine_head_batch,
)


def weighted_pool_reference(cloud, box, cfg):
    """Direct scalar evaluation of the pooling equation, kept deliberately
    dumb: loop points, assign cells, cap, weight, average."""
    k = cfg.k
    c, s = math.cos(box.r), math.sin(box.r)
    dims = (box.w, box.l, box.h)
    r = max(dims) / k
    cells = {}
    for i, p in enumerate(cloud.points):
        dx, dy, dz = p[0] - box.x, p[1] - box.y, p[2] - box.z
        lx = c * dx + s * dy
        ly = -s * dx + c * dy
        lz = dz
        if abs(lx) > box.w / 2 or abs(ly) > box.l / 2 or abs(lz) > box.h / 2:
            continue
        idx = []
        for val, dim in zip((lx, ly, lz), dims):
            j = math.floor((val + dim / 2) / (dim / k))
            idx.append(min(max(j, 0), k - 1))
        cells.setdefault(tuple(idx), []).append((i, (lx, ly, lz)))
    grid = np.zeros((k, k, k, cloud.channels))
    for idx, members in cells.items():
        members = members[: cfg.n_max]
        acc = np.zeros(cloud.channels)
        for i, (lx, ly, lz) in members:
            center = [(idx[a] + 0.5) * (dims[a] / k) - dims[a] / 2 for a in range(3)]
            d = math.sqrt((lx - center[0]) ** 2 + (ly - center[1]) ** 2 + (lz - center[2]) ** 2)
            acc += math.exp(1.0 - d / r) * cloud.features[i]
        grid[idx] = acc / len(members)
    return grid


def _rand_cloud(rng, n, channels=2, span=6.0):
    return PointCloud(rng.uniform(-span / 2, span / 2, (n, 3)), rng.normal(size=(n, channels)))


class TestPointsInBox:
    def test_center_included(self):
        cloud = PointCloud(np.array([[1.0, 2.0, 0.5]]), np.zeros((1, 0)))
        assert points_in_box(cloud, OrientedBox(1, 2, 0.5, 2, 3, 1, 0.7)).tolist() == [0]

    def test_face_center_boundary_included(self):
        cloud = PointCloud(np.array([[1.0, 0.0, 0.0]]), np.zeros((1, 0)))
        assert points_in_box(cloud, OrientedBox(0, 0, 0, 2, 2, 2, 0.0)).tolist() == [0]

    def test_axis_aligned_matches_componentwise_check(self):
        rng = np.random.default_rng(0)
        cloud = _rand_cloud(rng, 2000)
        box = OrientedBox(0.3, -0.5, 0.2, 1.5, 2.5, 1.0, 0.0)
        got = points_in_box(cloud, box)
        lo = np.array([box.x - box.w / 2, box.y - box.l / 2, box.z - box.h / 2])
        hi = np.array([box.x + box.w / 2, box.y + box.l / 2, box.z + box.h / 2])
        want = np.flatnonzero(np.all((cloud.points >= lo) & (cloud.points <= hi), axis=1))
        assert np.array_equal(got, want)

    def test_candidates_subset(self):
        rng = np.random.default_rng(1)
        cloud = _rand_cloud(rng, 500)
        box = OrientedBox(0, 0, 0, 2, 2, 2, 0.5)
        full = points_in_box(cloud, box)
        cands = np.arange(0, 500, 2)
        sub = points_in_box(cloud, box, candidates=cands)
        assert set(sub) == set(full) & set(cands)


class TestLaPool:
    def test_point_at_cell_center_weight_e(self):
        box = OrientedBox(0, 0, 0, 2, 2, 2, 0.0)
        # center of the middle cell (k=5 odd) is the box center
        cloud = PointCloud(np.array([[0.0, 0.0, 0.0]]), np.array([[1.0]]))
        roi = la_pool(cloud, box, RoiPoolConfig(k=5, n_max=5))
        assert roi.grid[2, 2, 2, 0] == pytest.approx(np.e)

    def test_weight_function_boundaries(self):
        assert location_weight(0.0, 0.4) == pytest.approx(np.e)
        assert location_weight(0.4, 0.4) == pytest.approx(1.0)
        assert 0.0 < location_weight(10.0, 0.4) < 1.0

    def test_truncation_at_n_max(self):
        # 7 points in one cell; only the 5 lowest-index ones contribute
        pts = np.array([[0.001 * i, 0.0, 0.0] for i in range(7)])
        cloud = PointCloud(pts, np.arange(7, dtype=np.float64).reshape(-1, 1))
        box = OrientedBox(0, 0, 0, 2, 2, 2, 0.0)
        cfg = RoiPoolConfig(k=5, n_max=5)
        roi = la_pool(cloud, box, cfg)
        ref = weighted_pool_reference(cloud, box, cfg)
        assert np.allclose(roi.grid, ref, atol=1e-9)
        trimmed = PointCloud(pts[:5], cloud.features[:5])
        assert np.allclose(la_pool(trimmed, box, cfg).grid, roi.grid, atol=1e-12)

    def test_matches_scalar_reference_on_random_rois(self):
        rng = np.random.default_rng(2)
        for t in range(30):
            cloud = _rand_cloud(rng, 300)
            box = OrientedBox(
                *rng.uniform(-1, 1, 3), *rng.uniform(0.8, 4, 3), rng.uniform(-np.pi, np.pi)
            )
            cfg = RoiPoolConfig(k=5, n_max=5 if t % 2 else 2)
            roi = la_pool(cloud, box, cfg)
            assert np.allclose(roi.grid, weighted_pool_reference(cloud, box, cfg), atol=1e-6)

    def test_rotation_equivariance(self):
        rng = np.random.default_rng(3)
        pts = rng.uniform(-1.5, 1.5, (200, 3))
        feats = rng.normal(size=(200, 2))
        box = OrientedBox(0.2, -0.3, 0.1, 2.0, 3.0, 1.5, 0.4)
        base = la_pool(PointCloud(pts, feats), box, RoiPoolConfig())
        ang = 1.1
        c, s = np.cos(ang), np.sin(ang)
        rot = np.stack(
            [c * pts[:, 0] - s * pts[:, 1], s * pts[:, 0] + c * pts[:, 1], pts[:, 2]], axis=1
        )
        box2 = OrientedBox(
            c * box.x - s * box.y, s * box.x + c * box.y, box.z, box.w, box.l, box.h, box.r + ang
        )
        moved = la_pool(PointCloud(rot, feats), box2, RoiPoolConfig())
        assert np.allclose(base.grid, moved.grid, atol=1e-6)

    def test_duplication_robustness(self):
        rng = np.random.default_rng(4)
        cloud = _rand_cloud(rng, 60, span=2.5)
        box = OrientedBox(0, 0, 0, 3, 3, 3, 0.3)
        cfg = RoiPoolConfig(k=5, n_max=1000)
        base = la_pool(cloud, box, cfg)
        doubled = PointCloud(
            np.concatenate([cloud.points, cloud.points]),
            np.concatenate([cloud.features, cloud.features]),
        )
        assert np.allclose(la_pool(doubled, box, cfg).grid, base.grid, atol=1e-9)

    def test_empty_interior_is_zero(self):
        cloud = PointCloud(np.array([[50.0, 0.0, 0.0]]), np.array([[1.0]]))
        roi = la_pool(cloud, OrientedBox(0, 0, 0, 1, 1, 1, 0), RoiPoolConfig())
        assert np.all(roi.grid == 0.0)

    def test_config_validation(self):
        with pytest.raises(ValueError):
            RoiPoolConfig(n_max=0)
        with pytest.raises(ValueError):
            RoiPoolConfig(k=0)


class TestRefineHead:
    def test_zero_grid_zero_weights(self):
        c = 4
        w = RefineHeadWeights(
            ConvZero(3, c, 8), ConvZero(3, 8, 8), [ConvZero(1, 8, 9)]
        )
        conf, res, flip = refine_head(np.zeros((5, 5, 5, c)), w)
        assert conf == 0.0 and flip == 0.0 and np.all(res == 0.0)

    @pytest.mark.parametrize("channels", [1, 8, 240])
    def test_shape_trace(self, channels):
        rng = np.random.default_rng(5)
        grid = rng.normal(size=(5, 5, 5, channels))
        w = init_refine_head(channels, (6, 7), (5,), seed=0)
        h1 = conv3d_valid(grid, w.conv1)
        assert h1.shape == (3, 3, 3, 6)
        h2 = conv3d_valid(np.maximum(h1, 0), w.conv2)
        assert h2.shape == (1, 1, 1, 7)
        conf, res, flip = refine_head(grid, w)
        assert res.shape == (7,)

    def test_rejects_wrong_shapes(self):
        w = init_refine_head(4, seed=0)
        with pytest.raises(ValueError):
            refine_head(np.zeros((4, 4, 4, 4)), w)
        with pytest.raises(ValueError):
            refine_head(np.zeros((5, 5, 5, 3)), w)
        with pytest.raises(ValueError):
            conv3d_valid(np.zeros((2, 2, 2, 4)), w.conv1)

    def test_preactivation_linearity(self):
        rng = np.random.default_rng(6)
        grid = rng.normal(size=(5, 5, 5, 3))
        w = init_refine_head(3, (4, 5), (6,), seed=1)
        out1 = np.array(refine_head_batch(grid[None], w, activation=None)[0])
        out2 = np.array(refine_head_batch((2.5 * grid)[None], w, activation=None)[0])
        assert np.allclose(out2, 2.5 * out1, atol=1e-9)

    def test_batch_matches_scalar(self):
        rng = np.random.default_rng(7)
        grids = rng.normal(size=(13, 5, 5, 5, 6))
        w = init_refine_head(6, (8, 8), (4,), seed=2)
        rows = refine_head_batch(grids, w)
        for i in range(len(grids)):
            conf, res, flip = refine_head(grids[i], w)
            assert np.allclose(rows[i], np.concatenate([[conf], res, [flip]]), atol=1e-12)

    def test_pooled_roi_input(self):
        rng = np.random.default_rng(8)
        cloud = _rand_cloud(rng, 100)
        box = OrientedBox(0, 0, 0, 2, 2, 2, 0.1)
        roi = la_pool(cloud, box, RoiPoolConfig())
        w = init_refine_head(cloud.channels, seed=3)
        conf, res, flip = refine_head(roi, w)
        assert np.isfinite(conf) and np.isfinite(flip) and np.all(np.isfinite(res))


def ConvZero(k, c_in, c_out):
    from voxdet.pointconv import ConvKernel

    return ConvKernel(np.zeros((k, k, k, c_in, c_out)), np.zeros(c_out))
