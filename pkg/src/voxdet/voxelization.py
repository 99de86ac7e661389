"""Dynamic local voxelization.

For each key-point, gather the neighbors within radius R through a spatial
acceleration grid and scatter them into a k*k*k voxel tensor with average
pooling. Two grid profiles exist: ``low_memory`` (sparse, sort-built CSR)
and ``fast`` (dense slot table over the cloud's bounding box); they produce
identical tensors.
"""

from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass
from typing import Optional

import numpy as np

from voxdet import backends
from voxdet.geometry import CapacityError, CellIndex, LocalVoxelTensor, PointCloud, cells_of
from voxdet.sampling import pack_cells

# Fixed work-unit size for batched voxelization. Keeping it independent of
# the thread count pins array shapes, so results are bitwise identical for
# any number of threads.
CHUNK = 2048

PROFILES = ("low_memory", "fast")


@dataclass(frozen=True)
class VoxelizationConfig:
    """Kernel radius R, odd kernel resolution k, optional per-voxel point cap,
    and whether mean point offsets are appended as 3 extra channels."""

    radius: float
    k: int = 3
    max_points_per_voxel: Optional[int] = None
    append_offsets: bool = False

    def __post_init__(self):
        if self.radius <= 0:
            raise ValueError(f"radius must be positive, got {self.radius}")
        if self.k < 1 or self.k % 2 == 0:
            raise ValueError(f"kernel resolution must be a positive odd integer, got {self.k}")
        if self.max_points_per_voxel is not None and self.max_points_per_voxel < 1:
            raise ValueError("max_points_per_voxel must be >= 1 when set")

    @property
    def edge(self) -> float:
        """Voxel edge length, 2R/k."""
        return 2.0 * self.radius / self.k


class AccelGrid:
    """Complete partition of a cloud's point indices by lattice cell.

    Immutable after build; shareable across threads and reusable for every
    query center at a given layer.
    """

    __slots__ = ("cell", "n_points", "profile", "_tuple", "_cells_sorted")

    def __init__(self, cell: float, n_points: int, profile: str, backend_tuple, cells_sorted):
        self.cell = cell
        self.n_points = n_points
        self.profile = profile
        self._tuple = backend_tuple
        self._cells_sorted = cells_sorted

    def backend_tuple(self):
        return self._tuple

    def cell_points(self) -> dict[CellIndex, np.ndarray]:
        """Cell -> point-index lists (introspection; queries use the kernels)."""
        out: dict[CellIndex, np.ndarray] = {}
        order = self._tuple[1]
        cs = self._cells_sorted
        if len(cs) == 0:
            return out
        head = np.ones(len(cs), dtype=bool)
        head[1:] = np.any(cs[1:] != cs[:-1], axis=1)
        bounds = np.concatenate([np.flatnonzero(head), [len(cs)]])
        for g in range(len(bounds) - 1):
            lo = bounds[g]
            c = cs[lo]
            out[CellIndex(int(c[0]), int(c[1]), int(c[2]))] = order[lo : bounds[g + 1]]
        return out


def build_accel_grid(
    cloud: PointCloud, cell: float, profile: str = "low_memory", slot_cap: int = 2**31
) -> AccelGrid:
    """Partition the cloud's indices into lattice cells of the given size."""
    if cell <= 0:
        raise ValueError(f"cell size must be positive, got {cell}")
    if profile not in PROFILES:
        raise ValueError(f"profile must be one of {PROFILES}, got {profile!r}")
    pts = cloud.points
    n = len(pts)
    cells = cells_of(pts, cell)
    if n == 0:
        empty = np.zeros(0, dtype=np.int64)
        bounds = (np.zeros(3, dtype=np.int64), np.full(3, -1, dtype=np.int64))
        if profile == "low_memory":
            tup = ("sparse", empty, empty, np.zeros(1, dtype=np.int64), cell, bounds)
        else:
            tup = (
                "dense",
                empty,
                np.zeros(1, dtype=np.int64),
                bounds[0],
                np.zeros(3, dtype=np.int64),
                cell,
                bounds,
            )
        return AccelGrid(cell, 0, profile, tup, np.zeros((0, 3), dtype=np.int64))
    lo = cells.min(axis=0)
    hi = cells.max(axis=0)
    bounds = (lo, hi)
    kern = backends.active
    if profile == "low_memory":
        keys = pack_cells(cells)
        order, ukeys, starts = kern.group_sparse(np.ascontiguousarray(keys))
        tup = ("sparse", order, ukeys, starts, cell, bounds)
    else:
        dims = hi - lo + 1
        n_slots = int(dims[0]) * int(dims[1]) * int(dims[2])
        if n_slots > slot_cap:
            raise CapacityError(
                f"dense accel grid needs {n_slots} slots, exceeding the cap of {slot_cap}; "
                "use the low_memory profile or a coarser cell"
            )
        rel = cells - lo
        flat = (rel[:, 0] * dims[1] + rel[:, 1]) * dims[2] + rel[:, 2]
        order, starts = kern.group_dense(np.ascontiguousarray(flat), n_slots)
        tup = ("dense", order, starts, lo, dims, cell, bounds)
    return AccelGrid(cell, n, profile, tup, cells[order])


def radius_neighbors(grid: AccelGrid, cloud: PointCloud, center, radius: float) -> np.ndarray:
    """Indices of points within Euclidean distance <= radius of center.

    Only cells overlapping the query ball are visited. Ascending index order.
    """
    if grid.n_points != len(cloud):
        raise ValueError("grid was not built over this cloud")
    c = np.ascontiguousarray(np.atleast_2d(np.asarray(center, dtype=np.float64)))
    _, idx = backends.active.radius_query(cloud.points, c, float(radius), grid.backend_tuple())
    return idx


def _voxelize_arrays(
    points: np.ndarray,
    feats: np.ndarray,
    centers: np.ndarray,
    cfg: VoxelizationConfig,
    grid: AccelGrid,
    threads: int = 1,
):
    """Array-level batched voxelization: (Q, k, k, k, C) tensors + voxel counts.

    Work is cut into fixed-size chunks regardless of thread count; each chunk
    writes a disjoint output slice, so results do not depend on scheduling.
    """
    q = len(centers)
    k = cfg.k
    cap = -1 if cfg.max_points_per_voxel is None else int(cfg.max_points_per_voxel)
    in_feats = np.hstack([feats, points]) if cfg.append_offsets else feats
    in_feats = np.ascontiguousarray(in_feats)
    c = in_feats.shape[1]
    out = np.zeros((q, k, k, k, c), dtype=np.float64)
    counts = np.zeros((q, k * k * k), dtype=np.int64)
    kern = backends.active
    tup = grid.backend_tuple()

    def run(lo: int) -> None:
        hi = min(lo + CHUNK, q)
        chunk_centers = np.ascontiguousarray(centers[lo:hi])
        t, vc = kern.voxelize_batch(points, in_feats, chunk_centers, cfg.radius, k, tup, cap)
        out[lo:hi] = t
        counts[lo:hi] = vc

    starts = range(0, q, CHUNK)
    if threads > 1 and q > CHUNK:
        with ThreadPoolExecutor(max_workers=threads) as pool:
            list(pool.map(run, starts))
    else:
        for lo in starts:
            run(lo)
    if cfg.append_offsets and q:
        occ = (counts > 0).reshape(q, k, k, k)
        out[..., -3:][occ] -= np.broadcast_to(centers[:, None, None, None, :], out[..., -3:].shape)[occ]
    return out, counts


def voxelize(
    cloud: PointCloud, center, cfg: VoxelizationConfig, grid: Optional[AccelGrid] = None
) -> LocalVoxelTensor:
    """Voxelize one center. Each neighbor lands in the voxel
    floor((p - center + R) / (2R/k)) clamped to [0, k-1]; occupied voxels hold
    the mean of their points' features, unoccupied voxels are zero."""
    if grid is None:
        grid = build_accel_grid(cloud, cfg.edge)
    c = np.asarray(center, dtype=np.float64).reshape(1, 3)
    out, _ = _voxelize_arrays(cloud.points, cloud.features, c, cfg, grid)
    return LocalVoxelTensor(out[0], c[0], cfg.radius)


def voxelize_batch(
    cloud: PointCloud,
    centers,
    cfg: VoxelizationConfig,
    grid: Optional[AccelGrid] = None,
    profile: str = "low_memory",
    threads: int = 1,
) -> list[LocalVoxelTensor]:
    """Map voxelize over centers, building the accel grid once."""
    ctrs = np.asarray(centers, dtype=np.float64).reshape(-1, 3)
    if grid is None:
        grid = build_accel_grid(cloud, cfg.edge, profile=profile)
    out, _ = _voxelize_arrays(cloud.points, cloud.features, ctrs, cfg, grid, threads=threads)
    return [LocalVoxelTensor(out[i], ctrs[i], cfg.radius) for i in range(len(ctrs))]
