"""Shared geometric domain types: points, clouds, lattice cells, oriented boxes.

All types are immutable after construction (arrays are marked read-only) and
therefore safe to share across threads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterable, NamedTuple

import numpy as np


class CapacityError(ValueError):
    """Raised when a dense grid would exceed its configured slot cap."""


class CellIndex(NamedTuple):
    """Signed integer 3D lattice coordinates."""

    i: int
    j: int
    k: int


@dataclass(frozen=True)
class Point3:
    """A finite 3D coordinate in meters."""

    x: float
    y: float
    z: float

    def __post_init__(self):
        if not (np.isfinite(self.x) and np.isfinite(self.y) and np.isfinite(self.z)):
            raise ValueError(f"Point3 components must be finite, got {(self.x, self.y, self.z)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z], dtype=np.float64)


def _as_point_array(p) -> np.ndarray:
    if isinstance(p, Point3):
        return p.as_array()
    a = np.asarray(p, dtype=np.float64)
    if a.shape != (3,):
        raise ValueError(f"expected a 3-vector, got shape {a.shape}")
    return a


def _frozen_view(a: np.ndarray) -> np.ndarray:
    """Read-only view; protects the container without freezing the caller's
    own array object."""
    v = a.view()
    v.setflags(write=False)
    return v


class PointCloud:
    """An ordered set of 3D points with one feature vector per point.

    points:   (N, 3) float64, finite
    features: (N, C) float64, C >= 0 and identical for every point
    """

    __slots__ = ("points", "features")

    def __init__(self, points, features=None):
        pts = np.ascontiguousarray(points, dtype=np.float64)
        if pts.ndim != 2 or pts.shape[1] != 3:
            raise ValueError(f"points must have shape (N, 3), got {pts.shape}")
        if not np.all(np.isfinite(pts)):
            raise ValueError("points must be finite")
        if features is None:
            feats = np.zeros((len(pts), 0), dtype=np.float64)
        else:
            feats = np.ascontiguousarray(features, dtype=np.float64)
            if feats.ndim != 2 or feats.shape[0] != len(pts):
                raise ValueError(
                    f"features must have shape (N, C) with N == {len(pts)}, got {feats.shape}"
                )
        self.points = _frozen_view(pts)
        self.features = _frozen_view(feats)

    def __len__(self) -> int:
        return len(self.points)

    @property
    def channels(self) -> int:
        return self.features.shape[1]

    def take(self, indices) -> "PointCloud":
        idx = np.asarray(indices, dtype=np.int64)
        return PointCloud(self.points[idx], self.features[idx])

    @staticmethod
    def empty(channels: int = 0) -> "PointCloud":
        return PointCloud(np.zeros((0, 3)), np.zeros((0, channels)))


@dataclass(frozen=True)
class OrientedBox:
    """A 7-parameter 3D box: center (x, y, z), extents (w, l, h), yaw r.

    The yaw is a rotation about the z axis, stored unnormalized; every
    consumer must be invariant to adding 2*pi.
    """

    x: float
    y: float
    z: float
    w: float
    l: float
    h: float
    r: float

    def __post_init__(self):
        vals = (self.x, self.y, self.z, self.w, self.l, self.h, self.r)
        if not all(np.isfinite(v) for v in vals):
            raise ValueError(f"box parameters must be finite, got {vals}")
        if not (self.w > 0 and self.l > 0 and self.h > 0):
            raise ValueError(f"box extents must be strictly positive, got {(self.w, self.l, self.h)}")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.z, self.w, self.l, self.h, self.r], dtype=np.float64)

    @staticmethod
    def from_array(a) -> "OrientedBox":
        a = np.asarray(a, dtype=np.float64)
        if a.shape != (7,):
            raise ValueError(f"expected a 7-vector, got shape {a.shape}")
        return OrientedBox(*a.tolist())

    @property
    def volume(self) -> float:
        return self.w * self.l * self.h


class LocalVoxelTensor:
    """A dense k*k*k*c voxel tensor anchored at one key-point.

    Unoccupied voxels are exactly zero in all channels.
    """

    __slots__ = ("data", "anchor", "radius")

    def __init__(self, data, anchor, radius: float):
        d = np.ascontiguousarray(data, dtype=np.float64)
        if d.ndim != 4 or not (d.shape[0] == d.shape[1] == d.shape[2]):
            raise ValueError(f"data must have shape (k, k, k, c), got {d.shape}")
        if radius <= 0:
            raise ValueError("radius must be positive")
        self.data = _frozen_view(d)
        self.anchor = _frozen_view(_as_point_array(anchor).copy())
        self.radius = float(radius)

    @property
    def resolution(self) -> int:
        return self.data.shape[0]

    @property
    def channels(self) -> int:
        return self.data.shape[3]


def cell_of(p, r: float) -> CellIndex:
    """Lattice cell of a point at grid resolution r (meters).

    Uses floor semantics (not truncation), so negative coordinates map to
    negative cells; a point exactly on a boundary belongs to the higher cell.
    """
    if r <= 0:
        raise ValueError(f"resolution must be positive, got {r}")
    a = _as_point_array(p)
    if not np.all(np.isfinite(a)):
        raise ValueError("point must be finite")
    ijk = np.floor(a / r).astype(np.int64)
    return CellIndex(int(ijk[0]), int(ijk[1]), int(ijk[2]))


def cells_of(points: np.ndarray, r: float, origin=None) -> np.ndarray:
    """Vectorized cell_of: (N, 3) points -> (N, 3) int64 lattice coordinates."""
    if r <= 0:
        raise ValueError(f"resolution must be positive, got {r}")
    pts = np.asarray(points, dtype=np.float64)
    if origin is not None:
        pts = pts - np.asarray(origin, dtype=np.float64)
    return np.floor(pts / r).astype(np.int64)


def rot_z(angle: float) -> np.ndarray:
    """2x2 rotation matrix for a yaw angle (BEV plane)."""
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s], [s, c]], dtype=np.float64)


# Local BEV corner offsets in units of (w/2, l/2): counterclockwise starting
# from (-w/2, +l/2) so that consecutive vertices share edges.
_CORNER_SIGNS = np.array(
    [[-1.0, 1.0], [-1.0, -1.0], [1.0, -1.0], [1.0, 1.0]], dtype=np.float64
)


def box_corners_bev(b: OrientedBox) -> np.ndarray:
    """The 4 BEV corners of a box in world coordinates, shape (4, 2).

    Counterclockwise winding, starting from the (-w/2, +l/2) local corner.
    """
    local = _CORNER_SIGNS * np.array([b.w * 0.5, b.l * 0.5])
    return local @ rot_z(b.r).T + np.array([b.x, b.y])


def grid_slot_counts(extents: Iterable[float], r: float) -> tuple[int, int, int]:
    """Number of grid slots per axis: floor(extent / r) with a small relative
    tolerance so that e.g. 150 m at r = 0.1 m yields exactly 1500 slots."""
    if r <= 0:
        raise ValueError(f"resolution must be positive, got {r}")
    out = []
    for e in extents:
        ratio = e / r
        out.append(int(np.floor(ratio + 1e-9 * max(1.0, abs(ratio)))))
    return tuple(out)
