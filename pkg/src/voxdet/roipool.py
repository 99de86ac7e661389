"""Location-aware RoI pooling and the second-stage refinement head.

Pooling happens in the box's local frame: the RoI is partitioned into a
k*k*k grid, each interior point is assigned to its containing cell, and up
to n_max points per cell are averaged with exponential distance weights
w = e^(1 - d/r), d being the distance to the cell center and
r = max(W, L, H) / k.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from voxdet.geometry import OrientedBox, PointCloud
from voxdet.pointconv import ConvKernel, _activate, init_kernel


@dataclass(frozen=True)
class RoiPoolConfig:
    """Pooling grid resolution and the per-cell point cap."""

    k: int = 5
    n_max: int = 5

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("grid resolution must be >= 1")
        if self.n_max < 1:
            raise ValueError("n_max must be >= 1")


@dataclass(frozen=True)
class PooledRoi:
    """A k*k*k*C pooled feature grid with its source box."""

    grid: np.ndarray
    box: OrientedBox


def _to_box_frame(points: np.ndarray, box: OrientedBox) -> np.ndarray:
    d = points - np.array([box.x, box.y, box.z])
    c, s = math.cos(box.r), math.sin(box.r)
    out = np.empty_like(d)
    out[:, 0] = c * d[:, 0] + s * d[:, 1]
    out[:, 1] = -s * d[:, 0] + c * d[:, 1]
    out[:, 2] = d[:, 2]
    return out


def points_in_box(cloud: PointCloud, box: OrientedBox, candidates=None) -> np.ndarray:
    """Indices of points inside the box (boundary inclusive), ascending.

    With `candidates`, only those indices are tested (callers use a radius
    pre-filter that is guaranteed to cover the box).
    """
    if candidates is None:
        pts = cloud.points
    else:
        candidates = np.asarray(candidates, dtype=np.int64)
        pts = cloud.points[candidates]
    local = _to_box_frame(pts, box)
    half = np.array([box.w, box.l, box.h]) * 0.5
    hit = np.flatnonzero(np.all(np.abs(local) <= half, axis=1)).astype(np.int64)
    return hit if candidates is None else candidates[hit]


def location_weight(d, r):
    """Pooling weight e^(1 - d/r): e at the cell center, 1 at distance r."""
    return np.exp(1.0 - np.asarray(d, dtype=np.float64) / r)


def la_pool(
    cloud: PointCloud,
    box: OrientedBox,
    cfg: RoiPoolConfig = RoiPoolConfig(),
    candidates=None,
) -> PooledRoi:
    """Pool interior point features into the box's k*k*k grid.

    Cells keep at most n_max points, lowest input index first; surplus points
    are omitted. Cells without points stay zero.
    """
    k = cfg.k
    c = cloud.channels
    grid = np.zeros((k, k, k, c), dtype=np.float64)
    idx = points_in_box(cloud, box, candidates)
    if len(idx) == 0:
        return PooledRoi(grid, box)
    local = _to_box_frame(cloud.points[idx], box)
    dims = np.array([box.w, box.l, box.h])
    half = dims * 0.5
    pitch = dims / k
    cell = np.floor((local + half) / pitch).astype(np.int64)
    np.clip(cell, 0, k - 1, out=cell)
    r_g = float(half.max()) * 2.0 / k  # max(W, L, H) / k
    flat = (cell[:, 0] * k + cell[:, 1]) * k + cell[:, 2]
    # cap each cell at n_max members, lowest input index first: rank within
    # the cell comes from a stable sort by cell id
    order = np.argsort(flat, kind="stable")
    sf = flat[order]
    pos = np.arange(len(sf))
    head = np.empty(len(sf), dtype=bool)
    head[0] = True
    np.not_equal(sf[1:], sf[:-1], out=head[1:])
    rank = pos - np.maximum.accumulate(np.where(head, pos, 0))
    members = order[rank < cfg.n_max]
    mcell = cell[members]
    centers = (mcell + 0.5) * pitch - half
    d = np.linalg.norm(local[members] - centers, axis=1)
    wf = location_weight(d, r_g)[:, None] * cloud.features[idx[members]]
    mflat = flat[members]
    acc = np.zeros((k * k * k, c), dtype=np.float64)
    np.add.at(acc, mflat, wf)
    counts = np.bincount(mflat, minlength=k * k * k)
    occ = counts > 0
    acc[occ] /= counts[occ, None]
    return PooledRoi(acc.reshape(k, k, k, c), box)


def la_pool_batch(
    cloud: PointCloud, boxes: Sequence[OrientedBox], cfg: RoiPoolConfig = RoiPoolConfig()
) -> list[PooledRoi]:
    """Independent la_pool per RoI (side-effect free, safe to parallelize)."""
    return [la_pool(cloud, b, cfg) for b in boxes]


def conv3d_valid(grid: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """Dense 3D convolution with valid padding: (n, n, n, c_in) ->
    (n - k + 1, ..., c_out)."""
    k = kernel.k
    if grid.ndim != 4 or grid.shape[0] != grid.shape[1] or grid.shape[1] != grid.shape[2]:
        raise ValueError(f"grid must be cubic (n, n, n, c), got {grid.shape}")
    if grid.shape[3] != kernel.c_in:
        raise ValueError(f"grid has {grid.shape[3]} channels, kernel expects {kernel.c_in}")
    if grid.shape[0] < k:
        raise ValueError("grid smaller than kernel; valid padding impossible")
    win = np.lib.stride_tricks.sliding_window_view(grid, (k, k, k), axis=(0, 1, 2))
    # win: (out, out, out, c_in, k, k, k) -> contract with (k, k, k, c_in)
    out = np.tensordot(win, kernel.weights, axes=([4, 5, 6, 3], [0, 1, 2, 3]))
    return out + kernel.bias


@dataclass(frozen=True)
class RefineHeadWeights:
    """Two valid-padding 3x3x3 convolutions plus the output MLP."""

    conv1: ConvKernel
    conv2: ConvKernel
    mlp: list[ConvKernel]  # 1x1x1 kernels acting as dense layers


def init_refine_head(
    c_in: int, conv_channels=(64, 64), mlp_hidden=(32,), seed: int = 0
) -> RefineHeadWeights:
    """Fresh refinement-head weights: outputs are 1 confidence + 7 box
    residuals + 1 flip logit."""
    rng = np.random.default_rng(seed)
    conv1 = init_kernel(3, c_in, conv_channels[0], rng)
    conv2 = init_kernel(3, conv_channels[0], conv_channels[1], rng)
    widths = [conv_channels[1], *mlp_hidden, 9]
    mlp = [init_kernel(1, a, b, rng) for a, b in zip(widths, widths[1:])]
    return RefineHeadWeights(conv1, conv2, mlp)


def refine_head(
    pooled: PooledRoi | np.ndarray,
    weights: RefineHeadWeights,
    activation: Optional[str] = "relu",
) -> tuple[float, np.ndarray, float]:
    """Second-stage head: 5^3 grid -> two valid 3x3x3 convolutions -> 1^3 ->
    MLP -> (confidence, 7 box residuals, flip logit)."""
    grid = pooled.grid if isinstance(pooled, PooledRoi) else np.asarray(pooled, dtype=np.float64)
    if grid.ndim != 4 or grid.shape[:3] != (5, 5, 5):
        raise ValueError(f"refine head expects a (5, 5, 5, C) grid, got {grid.shape}")
    h = _activate(conv3d_valid(grid, weights.conv1), activation)
    h = _activate(conv3d_valid(h, weights.conv2), activation)
    if h.shape[:3] != (1, 1, 1):
        raise ValueError(f"valid-padding trace broke: got spatial shape {h.shape[:3]}")
    x = h.reshape(-1)
    for layer in weights.mlp[:-1]:
        x = _activate(x @ layer.as_matrix() + layer.bias, activation)
    last = weights.mlp[-1]
    x = x @ last.as_matrix() + last.bias
    if x.shape != (9,):
        raise ValueError(f"refine head must emit 9 values, got {x.shape}")
    return float(x[0]), x[1:8].copy(), float(x[8])


def _conv3d_valid_stack(grids: np.ndarray, kernel: ConvKernel) -> np.ndarray:
    """conv3d_valid over a stack (Q, n, n, n, c_in), computed as one matmul
    per kernel offset so BLAS sees large operands."""
    k = kernel.k
    n = grids.shape[1]
    m = n - k + 1
    out = np.broadcast_to(kernel.bias, (grids.shape[0], m, m, m, kernel.c_out)).copy()
    for di in range(k):
        for dj in range(k):
            for dl in range(k):
                patch = grids[:, di : di + m, dj : dj + m, dl : dl + m, :]
                out += patch @ kernel.weights[di, dj, dl]
    return out


def refine_head_batch(
    grids: np.ndarray, weights: RefineHeadWeights, activation: Optional[str] = "relu"
) -> np.ndarray:
    """refine_head over a (Q, 5, 5, 5, C) stack; returns (Q, 9) rows of
    (confidence, 7 residuals, flip logit).

    Row i equals refine_head(grids[i], ...); work proceeds in fixed-size
    chunks so peak memory and results are independent of the batch size.
    """
    grids = np.asarray(grids, dtype=np.float64)
    if grids.ndim != 5 or grids.shape[1:4] != (5, 5, 5):
        raise ValueError(f"expected a (Q, 5, 5, 5, C) stack, got {grids.shape}")
    q = grids.shape[0]
    out = np.zeros((q, 9))
    chunk = 1024
    for lo in range(0, q, chunk):
        hi = min(lo + chunk, q)
        h = _activate(_conv3d_valid_stack(grids[lo:hi], weights.conv1), activation)
        h = _activate(_conv3d_valid_stack(h, weights.conv2), activation)
        x = h.reshape(hi - lo, -1)
        for layer in weights.mlp[:-1]:
            x = _activate(x @ layer.as_matrix() + layer.bias, activation)
        last = weights.mlp[-1]
        out[lo:hi] = x @ last.as_matrix() + last.bias
    return out
