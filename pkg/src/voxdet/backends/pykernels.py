"""Pure-numpy implementations of the hot kernels.

This module mirrors the compiled extension (`voxdet.backends._kernels`)
function for function; outputs must be bit-identical between the two so the
backend choice is invisible to callers. Accumulation order is therefore
pinned: neighbor lists are ascending by input index and per-voxel feature
sums run in that order.
"""

from __future__ import annotations

import numpy as np

NAME = "python"

# sentinel for an unclaimed 4-byte slot; the compiled twin hardcodes the
# same value
EMPTY_SLOT = 2**31 - 1
_EMPTY32 = np.int32(EMPTY_SLOT)


def claim_first(flat: np.ndarray, buf: np.ndarray) -> np.ndarray:
    """Write-once slot claiming over a dense grid buffer.

    `flat` holds one slot id per point; `buf` is the int32 slot buffer filled
    with the empty sentinel. Returns the winning input index per occupied
    slot, in ascending slot order. `buf` is restored to all-empty.
    """
    n = len(flat)
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    idx = np.arange(n, dtype=np.int32)
    np.minimum.at(buf, flat, idx)
    win = buf[flat] == idx
    slots = flat[win]
    winners = np.flatnonzero(win).astype(np.int64)
    buf[flat] = _EMPTY32
    order = np.argsort(slots, kind="stable")
    return winners[order]


def group_sparse(keys: np.ndarray):
    """CSR partition of indices by key.

    Returns (order, unique_keys, starts): groups in ascending key order,
    indices within a group ascending.
    """
    n = len(keys)
    order = np.argsort(keys, kind="stable").astype(np.int64)
    if n == 0:
        return order, np.zeros(0, dtype=np.int64), np.zeros(1, dtype=np.int64)
    sk = keys[order]
    head = np.empty(n, dtype=bool)
    head[0] = True
    np.not_equal(sk[1:], sk[:-1], out=head[1:])
    ukeys = sk[head]
    starts = np.concatenate([np.flatnonzero(head), [n]]).astype(np.int64)
    return order, ukeys, starts


def group_dense(flat: np.ndarray, n_slots: int):
    """CSR partition over a dense slot range [0, n_slots).

    Returns (order, starts) with starts of length n_slots + 1.
    """
    order = np.argsort(flat, kind="stable").astype(np.int64)
    counts = np.bincount(flat, minlength=n_slots)
    starts = np.zeros(n_slots + 1, dtype=np.int64)
    np.cumsum(counts, out=starts[1:])
    return order, starts


def _candidate_indices(grid, ci, cj, ck_lo, ck_hi):
    """Point indices for the run of cells (ci, cj, ck_lo..ck_hi)."""
    mode = grid[0]
    if mode == "sparse":
        _, order, ukeys, starts, _, bounds = grid
        lo_key = ((ci + (1 << 20)) << 42) | ((cj + (1 << 20)) << 21) | (ck_lo + (1 << 20))
        hi_key = lo_key + (ck_hi - ck_lo)
        a = np.searchsorted(ukeys, lo_key, side="left")
        b = np.searchsorted(ukeys, hi_key, side="right")
        out = [order[starts[g] : starts[g + 1]] for g in range(a, b)]
        return out
    _, order, starts, min_cell, dims, _, _ = grid
    base = ((ci - min_cell[0]) * dims[1] + (cj - min_cell[1])) * dims[2] - min_cell[2]
    s = starts[base + ck_lo]
    e = starts[base + ck_hi + 1]
    return [order[s:e]]


def _cell_range(grid, center, radius):
    mode = grid[0]
    cell = grid[4] if mode == "sparse" else grid[5]
    bounds = grid[5] if mode == "sparse" else grid[6]
    lo = np.floor((center - radius) / cell).astype(np.int64)
    hi = np.floor((center + radius) / cell).astype(np.int64)
    np.maximum(lo, bounds[0], out=lo)
    np.minimum(hi, bounds[1], out=hi)
    return lo, hi


def _query_one(points, grid, center, radius):
    lo, hi = _cell_range(grid, center, radius)
    if np.any(lo > hi):
        return np.zeros(0, dtype=np.int64)
    chunks = []
    for ci in range(lo[0], hi[0] + 1):
        for cj in range(lo[1], hi[1] + 1):
            chunks.extend(_candidate_indices(grid, ci, cj, lo[2], hi[2]))
    if not chunks:
        return np.zeros(0, dtype=np.int64)
    cand = np.concatenate(chunks)
    if len(cand) == 0:
        return cand
    d = points[cand] - center
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    hits = cand[d2 <= radius * radius]
    hits.sort()
    return hits


def radius_query(points, centers, radius, grid):
    """Neighbors within `radius` (inclusive) of each center.

    Returns (counts, indices): per-center neighbor counts and the
    concatenated, per-center ascending index lists.
    """
    q = len(centers)
    counts = np.zeros(q, dtype=np.int64)
    parts = []
    for i in range(q):
        hits = _query_one(points, grid, centers[i], radius)
        counts[i] = len(hits)
        parts.append(hits)
    indices = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return counts, indices


def voxelize_batch(points, feats, centers, radius, k, grid, cap=-1):
    """Scatter each center's neighbors into a k*k*k voxel tensor with
    average pooling. With cap >= 0 only the first `cap` points per voxel
    (ascending input index) contribute. Returns (out, vox_counts) with
    shapes (Q, k, k, k, C) and (Q, k**3)."""
    q = len(centers)
    c = feats.shape[1]
    edge = 2.0 * radius / k
    out = np.zeros((q, k * k * k, c), dtype=np.float64)
    vox_counts = np.zeros((q, k * k * k), dtype=np.int64)
    for i in range(q):
        hits = _query_one(points, grid, centers[i], radius)
        if len(hits) == 0:
            continue
        rel = (points[hits] - centers[i] + radius) / edge
        vi = np.floor(rel).astype(np.int64)
        np.clip(vi, 0, k - 1, out=vi)
        flat = (vi[:, 0] * k + vi[:, 1]) * k + vi[:, 2]
        if cap >= 0:
            perm = np.argsort(flat, kind="stable")
            sf = flat[perm]
            pos = np.arange(len(sf))
            head = np.empty(len(sf), dtype=bool)
            head[0] = True
            np.not_equal(sf[1:], sf[:-1], out=head[1:])
            rank = pos - np.maximum.accumulate(np.where(head, pos, 0))
            keep = np.zeros(len(sf), dtype=bool)
            keep[perm] = rank < cap
            flat = flat[keep]
            hits = hits[keep]
            if len(hits) == 0:
                continue
        np.add.at(out[i], flat, feats[hits])
        cnt = np.bincount(flat, minlength=k * k * k)
        vox_counts[i] = cnt
        occ = cnt > 0
        out[i][occ] /= cnt[occ, None]
    return out.reshape(q, k, k, k, c), vox_counts
