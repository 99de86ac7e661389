"""Independent oracles: Monte Carlo IoU, convex polygon clipping, brute-force
neighbor search / voxelization, and central finite differences.

These live in the shipped library (not test-only code) so the CLI can expose
reproducible verification runs. Each oracle is deliberately self-contained:
it never calls the accelerated code path it is meant to check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from voxdet.geometry import LocalVoxelTensor, OrientedBox, PointCloud


@dataclass(frozen=True)
class OracleConfig:
    """Sample budget, RNG seed, and finite-difference step."""

    samples: int = 1_000_000
    seed: int = 0
    fd_step: float = 1e-5

    def __post_init__(self):
        if self.samples < 1:
            raise ValueError("samples must be positive")


def _box_aabb(b: OrientedBox) -> tuple[np.ndarray, np.ndarray]:
    c, s = abs(math.cos(b.r)), abs(math.sin(b.r))
    ex = c * b.w * 0.5 + s * b.l * 0.5
    ey = s * b.w * 0.5 + c * b.l * 0.5
    lo = np.array([b.x - ex, b.y - ey, b.z - b.h * 0.5])
    hi = np.array([b.x + ex, b.y + ey, b.z + b.h * 0.5])
    return lo, hi


def _inside_box(pts: np.ndarray, b: OrientedBox) -> np.ndarray:
    dx = pts[:, 0] - b.x
    dy = pts[:, 1] - b.y
    c, s = math.cos(b.r), math.sin(b.r)
    lx = c * dx + s * dy
    ly = -s * dx + c * dy
    return (
        (np.abs(lx) <= b.w * 0.5)
        & (np.abs(ly) <= b.l * 0.5)
        & (np.abs(pts[:, 2] - b.z) <= b.h * 0.5)
    )


_STRATA_PER_AXIS = 16


def mc_iou3d(bp: OrientedBox, bg: OrientedBox, cfg: OracleConfig = OracleConfig()):
    """Monte Carlo 3D IoU by rejection sampling over the union's bounding box.

    Sampling is jitter-stratified on a fixed 16^3 lattice over the bounding
    box (plain uniform below 10^4 samples): interior strata contribute no
    variance, so only boundary-crossing cells add noise, while the fixed
    stratum count keeps the standard error scaling as 1/sqrt(samples). The
    counter-based Philox generator makes draws reproducible per seed and
    splittable. The IoU estimate is the in-both count over the in-either
    count; the standard error comes from the delta method on the stratified
    residuals.

    Returns (estimate, standard_error).
    """
    lo1, hi1 = _box_aabb(bp)
    lo2, hi2 = _box_aabb(bg)
    lo = np.minimum(lo1, lo2)
    hi = np.maximum(hi1, hi2)
    span = hi - lo
    rng = np.random.Generator(np.random.Philox(key=cfg.seed))

    g = _STRATA_PER_AXIS if cfg.samples >= 10_000 else 1
    s_count = g * g * g
    m = max(2, -(-cfg.samples // s_count))  # per-stratum draws, rounded up
    n = m * s_count
    cell_ijk = np.stack(
        np.unravel_index(np.arange(s_count), (g, g, g)), axis=1
    ).astype(np.float64)
    u = rng.random((m, s_count, 3))
    u += cell_ijk
    pts = (u * (span / g) + lo).reshape(n, 3)

    in_p = _inside_box(pts, bp)
    in_g = _inside_box(pts, bg)
    inter = (in_p & in_g).astype(np.float64)
    union = (in_p | in_g).astype(np.float64)
    n_u = union.sum()
    if n_u == 0.0:
        return 0.0, 0.0
    est = float(inter.sum() / n_u)
    resid = (inter - est * union).reshape(m, s_count)
    mean_u = n_u / n
    var_strata = resid.var(axis=0, ddof=1).mean()
    se = math.sqrt(var_strata / n) / mean_u
    return est, float(se)


def _edge_intersection(s, e, a, b):
    """Intersection of line (s, e) with line (a, b)."""
    dcx, dcy = a[0] - b[0], a[1] - b[1]
    dpx, dpy = s[0] - e[0], s[1] - e[1]
    n1 = a[0] * b[1] - a[1] * b[0]
    n2 = s[0] * e[1] - s[1] * e[0]
    den = dcx * dpy - dcy * dpx
    return ((n1 * dpx - n2 * dcx) / den, (n1 * dpy - n2 * dcy) / den)


def clip_polygons(subject, clip) -> np.ndarray:
    """Sutherland-Hodgman intersection of two convex CCW polygons.

    Boundary points count as inside. Returns the (possibly empty) vertex
    array of the intersection polygon.
    """
    out = [tuple(p) for p in np.asarray(subject, dtype=np.float64)]
    cp = [tuple(p) for p in np.asarray(clip, dtype=np.float64)]
    for i in range(len(cp)):
        if not out:
            break
        a, b = cp[i], cp[(i + 1) % len(cp)]
        ex, ey = b[0] - a[0], b[1] - a[1]
        inp = out
        out = []
        s = inp[-1]
        ss = ex * (s[1] - a[1]) - ey * (s[0] - a[0])
        for e in inp:
            es = ex * (e[1] - a[1]) - ey * (e[0] - a[0])
            if es >= 0.0:
                if ss < 0.0:
                    out.append(_edge_intersection(s, e, a, b))
                out.append(e)
            elif ss >= 0.0:
                out.append(_edge_intersection(s, e, a, b))
            s, ss = e, es
    return np.asarray(out, dtype=np.float64).reshape(-1, 2)


def polygon_area(vertices) -> float:
    """Shoelace area of an ordered polygon; < 3 vertices gives 0."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(v) < 3:
        return 0.0
    x, y = v[:, 0], v[:, 1]
    return 0.5 * abs(float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y)))


def bev_rect(b: OrientedBox) -> np.ndarray:
    """CCW BEV rectangle corners, built directly from cos/sin (oracle-local)."""
    c, s = math.cos(b.r), math.sin(b.r)
    hw, hl = b.w * 0.5, b.l * 0.5
    local = [(-hw, hl), (-hw, -hl), (hw, -hl), (hw, hl)]
    return np.array([(b.x + c * px - s * py, b.y + s * px + c * py) for px, py in local])


def dedupe_vertices(vertices, tol: float = 1e-7) -> np.ndarray:
    """Drop vertices within tol (Euclidean) of any earlier vertex."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    kept: list[np.ndarray] = []
    for p in v:
        if all((p[0] - q[0]) ** 2 + (p[1] - q[1]) ** 2 >= tol * tol for q in kept):
            kept.append(p)
    return np.asarray(kept, dtype=np.float64).reshape(-1, 2)


def brute_neighbors(cloud: PointCloud, center, radius: float) -> np.ndarray:
    """Exhaustive O(N) radius search; inclusive boundary, ascending indices."""
    c = np.asarray(center, dtype=np.float64)
    d = cloud.points - c
    d2 = d[:, 0] * d[:, 0] + d[:, 1] * d[:, 1] + d[:, 2] * d[:, 2]
    return np.flatnonzero(d2 <= radius * radius).astype(np.int64)


def brute_voxelize(cloud: PointCloud, center, radius: float, k: int, cap=None) -> LocalVoxelTensor:
    """Direct voxelization: distance test every point, then scatter/average.

    Mirrors the accelerated scatter semantics (floor((p - c + R) / (2R/k)),
    clamping, ascending-index accumulation, optional per-voxel cap).
    """
    c = np.asarray(center, dtype=np.float64)
    idx = brute_neighbors(cloud, c, radius)
    edge = 2.0 * radius / k
    data = np.zeros((k * k * k, cloud.channels), dtype=np.float64)
    count = np.zeros(k * k * k, dtype=np.int64)
    for i in idx:
        p = cloud.points[i]
        vi = np.floor((p - c + radius) / edge).astype(np.int64)
        vi = np.clip(vi, 0, k - 1)
        flat = (vi[0] * k + vi[1]) * k + vi[2]
        if cap is not None and count[flat] >= cap:
            continue
        data[flat] += cloud.features[i]
        count[flat] += 1
    occ = count > 0
    data[occ] /= count[occ, None]
    return LocalVoxelTensor(data.reshape(k, k, k, cloud.channels), c, radius)


def finite_diff(f, x, h: float = 1e-5) -> np.ndarray:
    """Central-difference gradient estimate of a scalar function."""
    x = np.asarray(x, dtype=np.float64)
    g = np.zeros_like(x)
    for i in range(len(x)):
        xp = x.copy()
        xm = x.copy()
        xp[i] += h
        xm[i] -= h
        g[i] = (f(xp) - f(xm)) / (2.0 * h)
    return g


def _random_box_pair(rng, max_offset: float = 3.0):
    dims = rng.uniform(0.5, 5.0, 6)
    off = rng.uniform(-max_offset, max_offset, 3)
    yaws = rng.uniform(-np.pi, np.pi, 2)
    return (
        OrientedBox(0.0, 0.0, 0.0, dims[0], dims[1], dims[2], yaws[0]),
        OrientedBox(off[0], off[1], off[2], dims[3], dims[4], dims[5], yaws[1]),
    )


def run_verify_suite(samples: int = 200_000, seed: int = 0, pairs: int = 100) -> list[tuple]:
    """Cross-check the accelerated implementations against every oracle.

    Returns (name, passed, detail) rows; used by the `verify` CLI subcommand.
    """
    from voxdet import sampling as sp
    from voxdet import voxelization as vx
    from voxdet.iou import bev_intersection_polygon, iou3d, iou3d_grad, shoelace_area

    rng = np.random.default_rng(seed)
    results = []

    spot = iou3d(OrientedBox(0, 0, 0, 2, 2, 2, 0), OrientedBox(1, 0, 0, 2, 2, 2, 0)).iou3d
    results.append(("analytic_spot_iou", abs(spot - 1.0 / 3.0) < 1e-9, f"1/3 case -> {spot:.9f}"))

    worst = 0.0
    for i in range(pairs):
        bp, bg = _random_box_pair(rng, max_offset=1.5)
        est, _ = mc_iou3d(bp, bg, OracleConfig(samples=samples, seed=seed + i))
        worst = max(worst, abs(iou3d(bp, bg).iou3d - est))
    tol = max(2e-3, 2e-3 * np.sqrt(1e6 / samples))
    results.append(("iou_vs_monte_carlo", worst < tol, f"max |iou - mc| = {worst:.2e} (tol {tol:.1e})"))

    worst = 0.0
    for _ in range(max(pairs * 10, 1000)):
        bp, bg = _random_box_pair(rng)
        a1 = shoelace_area(bev_intersection_polygon(bp, bg))
        a2 = polygon_area(clip_polygons(bev_rect(bp), bev_rect(bg)))
        worst = max(worst, abs(a1 - a2))
    results.append(("polygon_vs_clip_oracle", worst < 1e-7, f"max area diff = {worst:.2e}"))

    bad = smooth = 0
    for _ in range(pairs * 2):
        bp, bg = _random_box_pair(rng)
        gr = iou3d_grad(bp, bg)
        if not gr.smooth:
            continue
        smooth += 1
        x = np.concatenate([bp.as_array(), bg.as_array()])

        def f(v):
            return iou3d(OrientedBox(*v[:7]), OrientedBox(*v[7:])).loss

        fd = finite_diff(f, x, 1e-5)
        err = np.max(np.abs(gr.gradient - fd)) / max(np.max(np.abs(fd)), 1e-6)
        if err > 1e-3:
            bad += 1
    results.append(
        ("gradient_vs_finite_diff", bad == 0 and smooth > 0, f"{bad} bad of {smooth} smooth pairs")
    )

    ok = True
    for t in range(20):
        pts = rng.uniform(-4, 4, (rng.integers(50, 400), 3))
        cloud = PointCloud(pts, rng.normal(size=(len(pts), 2)))
        grid = vx.build_accel_grid(cloud, 0.5, profile="low_memory" if t % 2 else "fast")
        for _ in range(5):
            c = rng.uniform(-4, 4, 3)
            r = rng.uniform(0.2, 1.5)
            got = vx.radius_neighbors(grid, cloud, c, r)
            want = brute_neighbors(cloud, c, r)
            ok &= np.array_equal(got, want)
            tens = vx.voxelize(cloud, c, vx.VoxelizationConfig(r, 3), grid)
            ref = brute_voxelize(cloud, c, r, 3)
            ok &= bool(np.allclose(tens.data, ref.data, atol=1e-6))
    results.append(("neighbors_and_voxels_vs_brute", ok, "exact index sets, features to 1e-6"))

    ok = True
    for t in range(10):
        pts = rng.uniform(0, 10, (rng.integers(100, 3000), 3))
        cloud = PointCloud(pts, np.zeros((len(pts), 0)))
        kw = dict(extents=(10.0, 10.0, 10.0), origin=(0.0, 0.0, 0.0), seed=t)
        rb = sp.downsample_grid_buffer(cloud, sp.SamplingConfig(0.5, sp.Strategy.GRID_BUFFER, **kw))
        rs = sp.downsample_sort_unique(cloud, sp.SamplingConfig(0.5, sp.Strategy.SORT_UNIQUE, **kw))
        ok &= {tuple(c) for c in rb.cells} == {tuple(c) for c in rs.cells}
    results.append(("sampling_strategy_equivalence", ok, "occupied-cell sets agree"))

    return results
