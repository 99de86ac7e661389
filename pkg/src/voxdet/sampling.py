"""Grid-based point downsampling.

Two interchangeable strategies select one representative point per occupied
lattice cell:

* ``GRID_BUFFER`` claims slots in a preallocated dense buffer, write-once,
  O(n) time; requires finite extents and trades memory for speed.
* ``SORT_UNIQUE`` sorts points by cell key and picks a seeded-uniform winner
  per cell, O(n log n) time, no grid buffer.

Both strategies produce the same occupied-cell set on the same input; the
selected point may differ in cells holding more than one point.
"""

from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from voxdet import backends
from voxdet.backends.pykernels import EMPTY_SLOT
from voxdet.geometry import CapacityError, PointCloud, cells_of, grid_slot_counts

_PACK_BITS = 21
_PACK_BASE = 1 << 20


class Strategy(Enum):
    GRID_BUFFER = "grid_buffer"
    SORT_UNIQUE = "sort_unique"


@dataclass(frozen=True)
class SamplingConfig:
    """Downsampling parameters.

    extents is (W, L, H) in meters; origin is the minimum corner of the
    admissible region and fixes the lattice. GRID_BUFFER requires both.
    """

    resolution: float
    strategy: Strategy = Strategy.SORT_UNIQUE
    extents: Optional[tuple[float, float, float]] = None
    origin: tuple[float, float, float] = (0.0, 0.0, 0.0)
    seed: int = 0
    deterministic: bool = True
    slot_cap: int = 2**31

    def __post_init__(self):
        if self.resolution <= 0:
            raise ValueError(f"resolution must be positive, got {self.resolution}")
        if self.strategy is Strategy.GRID_BUFFER and self.extents is None:
            raise ValueError("GRID_BUFFER strategy requires finite extents")
        if self.extents is not None and not all(
            np.isfinite(e) and e > 0 for e in self.extents
        ):
            raise ValueError(f"extents must be positive and finite, got {self.extents}")


@dataclass(frozen=True)
class SampleResult:
    """One selected input index per occupied cell.

    cells are lattice coordinates relative to the configured origin, paired
    with indices row for row. dropped counts points outside the extents.
    buffer_bytes is the dense buffer footprint (0 for the sort strategy).
    """

    indices: np.ndarray
    cells: np.ndarray
    dropped: int = 0
    buffer_bytes: int = 0

    def __len__(self) -> int:
        return len(self.indices)


class GridBufferWorkspace:
    """Reusable write-once slot buffer.

    The buffer is allocated on first use and grown on demand; after every
    downsampling call it is back in the all-empty state, so one workspace can
    serve many calls without re-allocating. Single-owner: not thread-safe.
    """

    def __init__(self):
        self._buf: Optional[np.ndarray] = None

    def buffer(self, n_slots: int) -> np.ndarray:
        if self._buf is None or len(self._buf) < n_slots:
            self._buf = np.full(max(n_slots, 1), EMPTY_SLOT, dtype=np.int32)
        return self._buf[:n_slots]


def _in_bounds_cells(cloud: PointCloud, cfg: SamplingConfig):
    """Cells for all points plus the in-bounds mask (all-true without extents)."""
    cells = cells_of(cloud.points, cfg.resolution, origin=cfg.origin)
    if cfg.extents is None:
        return cells, np.ones(len(cells), dtype=bool), None
    dims = np.array(grid_slot_counts(cfg.extents, cfg.resolution), dtype=np.int64)
    mask = np.all((cells >= 0) & (cells < dims), axis=1)
    return cells, mask, dims


def downsample_grid_buffer(
    cloud: PointCloud, cfg: SamplingConfig, workspace: Optional[GridBufferWorkspace] = None
) -> SampleResult:
    """Write-once grid-buffer downsampling, O(n) in the point count.

    Allocates (or borrows) a dense buffer of one 4-byte slot per grid cell
    over the configured extents. Each slot accepts only its first writer; in
    deterministic mode (and under the sequential schedule generally) that is
    the lowest input index in the cell. Points outside the extents are
    dropped and counted.
    """
    if cfg.strategy is not Strategy.GRID_BUFFER:
        raise ValueError("config strategy must be GRID_BUFFER")
    cells, mask, dims = _in_bounds_cells(cloud, cfg)
    n_slots = int(dims[0] * dims[1] * dims[2])
    if n_slots > cfg.slot_cap:
        raise CapacityError(
            f"grid buffer needs {n_slots} slots, exceeding the cap of {cfg.slot_cap}; "
            "raise slot_cap or coarsen the resolution"
        )
    if len(cloud) > EMPTY_SLOT - 1:
        raise CapacityError("point count exceeds 4-byte slot payload range")
    dropped = int(len(cells) - mask.sum())
    keep = np.flatnonzero(mask)
    buffer_bytes = n_slots * 4
    if len(keep) == 0:
        return SampleResult(
            np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64), dropped, buffer_bytes
        )
    kc = cells[keep]
    flat = (kc[:, 0] * dims[1] + kc[:, 1]) * dims[2] + kc[:, 2]
    ws = workspace if workspace is not None else GridBufferWorkspace()
    buf = ws.buffer(n_slots)
    winners_local = backends.active.claim_first(np.ascontiguousarray(flat), buf)
    indices = keep[winners_local]
    return SampleResult(indices, cells[indices], dropped, buffer_bytes)


def _splitmix64(x: np.ndarray) -> np.ndarray:
    z = x + np.uint64(0x9E3779B97F4A7C15)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(0xBF58476D1CE4E5B9)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(0x94D049BB133111EB)
    return z ^ (z >> np.uint64(31))


def pack_cells(cells: np.ndarray) -> np.ndarray:
    """Pack (N, 3) lattice coordinates into sortable int64 keys (21 bits/axis)."""
    if len(cells) and (cells.min() < -_PACK_BASE or cells.max() >= _PACK_BASE):
        raise ValueError(
            "cell index out of packable range (+-2^20); coarsen the resolution or crop the cloud"
        )
    return (
        ((cells[:, 0] + _PACK_BASE) << (2 * _PACK_BITS))
        | ((cells[:, 1] + _PACK_BASE) << _PACK_BITS)
        | (cells[:, 2] + _PACK_BASE)
    )


def downsample_sort_unique(cloud: PointCloud, cfg: SamplingConfig) -> SampleResult:
    """Sort-by-cell downsampling, O(n log n), no grid buffer.

    The per-cell winner is a seeded-uniform choice among the cell's points
    (splitmix64 scores; lowest score wins, ties by input index). With
    deterministic=False a fresh seed is drawn per call.
    """
    if cfg.strategy is not Strategy.SORT_UNIQUE:
        raise ValueError("config strategy must be SORT_UNIQUE")
    cells, mask, _ = _in_bounds_cells(cloud, cfg)
    dropped = int(len(cells) - mask.sum())
    keep = np.flatnonzero(mask)
    if len(keep) == 0:
        return SampleResult(np.zeros(0, dtype=np.int64), np.zeros((0, 3), dtype=np.int64), dropped, 0)
    kc = cells[keep]
    keys = pack_cells(kc)
    seed = cfg.seed if cfg.deterministic else int(np.random.SeedSequence().entropy % (1 << 63))
    with np.errstate(over="ignore"):
        h = _splitmix64(np.uint64(seed) ^ keys.astype(np.uint64))
        scores = _splitmix64(h ^ np.arange(len(keys), dtype=np.uint64))
    perm = np.lexsort((np.arange(len(keys)), scores, keys))
    sk = keys[perm]
    head = np.empty(len(sk), dtype=bool)
    head[0] = True
    np.not_equal(sk[1:], sk[:-1], out=head[1:])
    winners_local = perm[head]
    indices = keep[winners_local]
    return SampleResult(indices, cells[indices], dropped, 0)


def downsample(cloud: PointCloud, cfg: SamplingConfig, workspace=None) -> SampleResult:
    """Dispatch on cfg.strategy."""
    if cfg.strategy is Strategy.GRID_BUFFER:
        return downsample_grid_buffer(cloud, cfg, workspace)
    return downsample_sort_unique(cloud, cfg)


def gather(cloud: PointCloud, result: SampleResult) -> PointCloud:
    """New cloud holding exactly the selected points, in result order."""
    idx = np.asarray(result.indices, dtype=np.int64)
    if len(idx) and (idx.min() < 0 or idx.max() >= len(cloud)):
        raise IndexError("sample result indices out of range for this cloud")
    return cloud.take(idx)
