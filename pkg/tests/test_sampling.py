import numpy as np
import pytest

from voxdet.geometry import CapacityError, PointCloud, cells_of
from voxdet.sampling import (
    GridBufferWorkspace,
    SamplingConfig,
    Strategy,
    downsample,
    downsample_grid_buffer,
    downsample_sort_unique,
    gather,
    pack_cells,
)

EXTENTS = dict(extents=(10.0, 10.0, 10.0), origin=(0.0, 0.0, 0.0))


def _cloud(points):
    pts = np.asarray(points, dtype=np.float64)
    return PointCloud(pts, np.arange(len(pts), dtype=np.float64).reshape(-1, 1))


def _cfg(strategy, r=0.1, **kw):
    base = dict(EXTENTS)
    base.update(kw)
    return SamplingConfig(r, strategy, **base)


class TestGridBuffer:
    def test_single_cell_keeps_lowest_index(self):
        cloud = _cloud([[0.05, 0.05, 0.05]] * 5)
        res = downsample_grid_buffer(cloud, _cfg(Strategy.GRID_BUFFER))
        assert len(res) == 1
        assert res.indices.tolist() == [0]

    def test_two_cells(self):
        cloud = _cloud([[0.05, 0.05, 0.05], [0.15, 0.05, 0.05]])
        res = downsample_grid_buffer(cloud, _cfg(Strategy.GRID_BUFFER))
        assert len(res) == 2
        assert {tuple(c) for c in res.cells} == {(0, 0, 0), (1, 0, 0)}

    def test_buffer_bytes_report(self):
        cloud = _cloud([[0.05, 0.05, 0.05]])
        res = downsample_grid_buffer(cloud, _cfg(Strategy.GRID_BUFFER, r=0.5))
        assert res.buffer_bytes == 20 * 20 * 20 * 4

    def test_capacity_error(self):
        cloud = _cloud([[0.05, 0.05, 0.05]])
        cfg = _cfg(Strategy.GRID_BUFFER, r=0.5, slot_cap=100)
        with pytest.raises(CapacityError):
            downsample_grid_buffer(cloud, cfg)

    def test_outside_points_dropped_and_counted(self):
        cloud = _cloud([[0.5, 0.5, 0.5], [11.0, 0.5, 0.5], [-0.1, 0.5, 0.5]])
        res = downsample_grid_buffer(cloud, _cfg(Strategy.GRID_BUFFER))
        assert res.dropped == 2
        assert res.indices.tolist() == [0]

    def test_requires_extents(self):
        with pytest.raises(ValueError):
            SamplingConfig(0.1, Strategy.GRID_BUFFER)

    def test_workspace_reuse(self):
        ws = GridBufferWorkspace()
        cloud = _cloud(np.random.default_rng(0).uniform(0, 10, (500, 3)))
        cfg = _cfg(Strategy.GRID_BUFFER, r=0.5)
        a = downsample_grid_buffer(cloud, cfg, ws)
        b = downsample_grid_buffer(cloud, cfg, ws)
        assert np.array_equal(a.indices, b.indices)


class TestSortUnique:
    def test_three_points_two_cells(self):
        cloud = _cloud([[0.05, 0.05, 0.05], [0.06, 0.05, 0.05], [0.15, 0.05, 0.05]])
        res = downsample_sort_unique(cloud, _cfg(Strategy.SORT_UNIQUE))
        assert len(res) == 2

    def test_empty_cloud(self):
        res = downsample_sort_unique(PointCloud.empty(1), _cfg(Strategy.SORT_UNIQUE))
        assert len(res) == 0 and res.dropped == 0

    def test_occupancy_matches_brute_force(self):
        rng = np.random.default_rng(7)
        cloud = _cloud(rng.uniform(0, 10, (10_000, 3)))
        res = downsample_sort_unique(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.5))
        brute = {tuple(c) for c in cells_of(cloud.points, 0.5)}
        assert {tuple(c) for c in res.cells} == brute

    def test_seeded_choice_reproducible(self):
        rng = np.random.default_rng(8)
        cloud = _cloud(rng.uniform(0, 2, (300, 3)))
        a = downsample_sort_unique(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.5, seed=1))
        b = downsample_sort_unique(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.5, seed=1))
        c = downsample_sort_unique(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.5, seed=2))
        assert np.array_equal(a.indices, b.indices)
        assert {tuple(x) for x in a.cells} == {tuple(x) for x in c.cells}

    def test_works_without_extents(self):
        cloud = _cloud([[-5.0, 0.0, 0.0], [5.0, 0.0, 0.0]])
        res = downsample_sort_unique(cloud, SamplingConfig(0.5, Strategy.SORT_UNIQUE))
        assert len(res) == 2

    def test_pack_cells_range_check(self):
        with pytest.raises(ValueError):
            pack_cells(np.array([[2**20, 0, 0]]))


class TestGather:
    def test_identity(self):
        rng = np.random.default_rng(9)
        cloud = _cloud(rng.uniform(0, 10, (50, 3)))
        res = downsample_sort_unique(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.001))
        out = gather(cloud, res)
        assert len(out) == len(cloud)

    def test_empty(self):
        res = downsample_sort_unique(PointCloud.empty(1), _cfg(Strategy.SORT_UNIQUE))
        out = gather(PointCloud.empty(1), res)
        assert len(out) == 0

    def test_size_contract(self):
        rng = np.random.default_rng(10)
        cloud = _cloud(rng.uniform(0, 10, (500, 3)))
        res = downsample(cloud, _cfg(Strategy.GRID_BUFFER, r=0.7))
        assert len(gather(cloud, res)) == len(res.indices)

    def test_out_of_range_error(self):
        from voxdet.sampling import SampleResult

        cloud = _cloud([[0.0, 0.0, 0.0]])
        bad = SampleResult(np.array([5]), np.zeros((1, 3), dtype=np.int64))
        with pytest.raises(IndexError):
            gather(cloud, bad)


class TestInvariants:
    @pytest.mark.parametrize("strategy", [Strategy.GRID_BUFFER, Strategy.SORT_UNIQUE])
    def test_subset_and_one_per_cell(self, strategy):
        rng = np.random.default_rng(11)
        cloud = _cloud(rng.uniform(0, 10, (3000, 3)))
        res = downsample(cloud, _cfg(strategy, r=0.4))
        out = gather(cloud, res)
        # bit-identical subset: each output point is an input row
        for p, i in zip(out.points, res.indices):
            assert np.array_equal(p, cloud.points[i])
        cells = cells_of(out.points, 0.4)
        assert len({tuple(c) for c in cells}) == len(out)
        assert np.array_equal(cells, res.cells)

    def test_strategy_equivalence(self):
        rng = np.random.default_rng(12)
        for n in (10, 100, 5000):
            cloud = _cloud(rng.uniform(0, 10, (n, 3)))
            rb = downsample(cloud, _cfg(Strategy.GRID_BUFFER, r=0.3))
            rs = downsample(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.3))
            assert {tuple(c) for c in rb.cells} == {tuple(c) for c in rs.cells}

    def test_winners_agree_on_singleton_cells(self):
        # spread points far apart so every cell holds exactly one point
        rng = np.random.default_rng(13)
        pts = rng.permutation(np.arange(0.25, 10.0, 0.5))[:15]
        pts = np.stack([pts, np.full(15, 0.25), np.full(15, 0.25)], axis=1)
        cloud = _cloud(pts)
        rb = downsample(cloud, _cfg(Strategy.GRID_BUFFER, r=0.5))
        rs = downsample(cloud, _cfg(Strategy.SORT_UNIQUE, r=0.5))
        assert set(rb.indices.tolist()) == set(rs.indices.tolist()) == set(range(15))

    @pytest.mark.parametrize("strategy", [Strategy.GRID_BUFFER, Strategy.SORT_UNIQUE])
    def test_idempotence(self, strategy):
        rng = np.random.default_rng(14)
        cloud = _cloud(rng.uniform(0, 10, (2000, 3)))
        once = gather(cloud, downsample(cloud, _cfg(strategy, r=0.6)))
        twice = gather(once, downsample(once, _cfg(strategy, r=0.6)))
        a = {tuple(p) for p in once.points}
        b = {tuple(p) for p in twice.points}
        assert a == b
