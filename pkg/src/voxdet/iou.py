"""Differentiable 3D IoU between yaw-rotated boxes.

The BEV intersection polygon is built from a fixed 24-slot candidate set:
16 edge/axis-line intersections, the first box's corners expressed in the
second box's frame, and the second box's own corners. Candidates are
filtered against both boxes' bounds, deduplicated, sorted counterclockwise,
and measured with the Shoelace formula; the vertical overlap then completes
the 3D IoU.

The same arithmetic runs on plain floats or on `Dual` scalars. All discrete
decisions (candidate acceptance, filtering, dedup, sort order) are taken on
primal values, so the gradient is that of the locally-selected smooth
branch; configurations within 1e-6 of a decision boundary are flagged
non-smooth.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from voxdet.dual import Dual, cos, maximum, minimum, sin, value_of
from voxdet.geometry import OrientedBox

INSIDE_TOL = 1e-7  # bounds filter slack: corners of tangent boxes must not flicker
MERGE_TOL = 1e-7  # duplicate-vertex merge radius
TIE_TOL = 1e-6  # margin under which a discrete decision counts as a tie
DEGENERATE_AREA = 1e-12

# Axis-line order for the 16 intersection slots: x=+wg/2, x=-wg/2, y=+lg/2, y=-lg/2.
_LINES = ((0, 1.0), (0, -1.0), (1, 1.0), (1, -1.0))
# Corner sign pattern, counterclockwise from (-w/2, +l/2).
_SIGNS = ((-1.0, 1.0), (-1.0, -1.0), (1.0, -1.0), (1.0, 1.0))


@dataclass(frozen=True)
class IouResult:
    """3D IoU, its loss (1 - IoU), and the BEV intersection diagnostics."""

    iou3d: float
    loss: float
    bev_area: float
    height_overlap: float
    polygon: np.ndarray


@dataclass(frozen=True)
class IouGradResult:
    """Loss with its gradient w.r.t. the 14 box parameters (7 + 7).

    smooth is False when the configuration sat within TIE_TOL of a discrete
    decision (filter, merge, sort, or min/max tie); the gradient is still the
    derivative of the branch that was actually evaluated.
    """

    loss: float
    gradient: np.ndarray
    iou3d: float
    smooth: bool


class _Trace:
    """Collects closeness-to-tie evidence while the algorithm runs."""

    __slots__ = ("smooth",)

    def __init__(self):
        self.smooth = True

    def tie(self, margin: float) -> None:
        if margin < TIE_TOL:
            self.smooth = False


def _rotate(px, py, c, s):
    return c * px - s * py, s * px + c * py


def to_frame(points, src_box: OrientedBox, dst_box: OrientedBox) -> np.ndarray:
    """Re-express BEV points given in src_box's local frame in dst_box's frame.

    world = R(r_src) p + center_src, then local = R(-r_dst) (world - center_dst).
    """
    p = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    cs, ss = math.cos(src_box.r), math.sin(src_box.r)
    wx = cs * p[:, 0] - ss * p[:, 1] + src_box.x
    wy = ss * p[:, 0] + cs * p[:, 1] + src_box.y
    cd, sd = math.cos(dst_box.r), math.sin(dst_box.r)
    dx, dy = wx - dst_box.x, wy - dst_box.y
    return np.stack([cd * dx + sd * dy, -sd * dx + cd * dy], axis=1)


def _candidates(bp, bg, trace: _Trace):
    """The 24-slot candidate list in g's frame (None for absent slots)."""
    xp, yp, _, wp, lp, _, rp = bp
    xg, yg, _, wg, lg, _, rg = bg
    hwp, hlp = wp * 0.5, lp * 0.5
    hwg, hlg = wg * 0.5, lg * 0.5

    cd, sd = cos(rp - rg), sin(rp - rg)
    cg, sg = cos(rg), sin(rg)
    dx, dy = xp - xg, yp - yg
    ox = cg * dx + sg * dy
    oy = -sg * dx + cg * dy

    corners_p = []
    for sx, sy in _SIGNS:
        px, py = _rotate(sx * hwp, sy * hlp, cd, sd)
        corners_p.append((px + ox, py + oy))
    corners_g = [(sx * hwg, sy * hlg) for sx, sy in _SIGNS]

    # each slot carries (point, g_ties, p_ties): which axes of the two bound
    # filters get tie tracking. An intersection candidate sits exactly on its
    # own g-frame line for every parameter value, and a corner maps exactly
    # onto its own box's bounds, so those coordinates are structurally pinned
    # to the boundary and their filter decisions cannot flip.
    cands: list = [None] * 24
    bounds = (hwg, hwg, hlg, hlg)
    for e in range(4):
        ax_, ay = corners_p[e]
        bx, by = corners_p[(e + 1) % 4]
        edge = (ax_, ay, bx, by)
        for li, (axis, sign) in enumerate(_LINES):
            bound = bounds[li] * sign
            a_ax = edge[axis]
            b_ax = edge[2 + axis]
            denom = b_ax - a_ax
            dv = value_of(denom)
            if abs(dv) < 1e-12:
                continue
            t = (bound - a_ax) / denom
            tv = value_of(t)
            trace.tie(abs(tv))
            trace.tie(abs(1.0 - tv))
            if tv < 0.0 or tv > 1.0:
                continue
            # the candidate sits on g's line (its own axis) and on p's edge e
            # (x-edges for even e, y-edges for odd e): both pinned
            g_ties = (axis == 1, axis == 0)
            p_ties = (e % 2 == 1, e % 2 == 0)
            cands[e * 4 + li] = (
                (ax_ + (bx - ax_) * t, ay + (by - ay) * t),
                g_ties,
                p_ties,
            )
    for i in range(4):
        cands[16 + i] = (corners_p[i], (True, True), (False, False))
        cands[20 + i] = (corners_g[i], (False, False), (True, True))
    return cands, (hwg, hlg), (hwp, hlp), (ox, oy), (cd, sd)


def _inside(pt, hw, hl, trace: _Trace, ties=(True, True)) -> bool:
    x, y = abs(value_of(pt[0])), abs(value_of(pt[1]))
    bx, by = value_of(hw), value_of(hl)
    if ties[0]:
        trace.tie(abs(x - bx))
    if ties[1]:
        trace.tie(abs(y - by))
    return x <= bx + INSIDE_TOL and y <= by + INSIDE_TOL


def _polygon_vertices(bp, bg, trace: _Trace):
    """Filtered, deduplicated intersection vertices in g's frame."""
    cands, (hwg, hlg), (hwp, hlp), (ox, oy), (cd, sd) = _candidates(bp, bg, trace)

    survivors = []
    for item in cands:
        if item is None:
            continue
        pt, g_ties, p_ties = item
        if not _inside(pt, hwg, hlg, trace, g_ties):
            continue
        # back into p's frame: invert q = R(d) p + o  =>  p = R(-d) (q - o)
        qx, qy = pt[0] - ox, pt[1] - oy
        lx = cd * qx + sd * qy
        ly = -sd * qx + cd * qy
        if not _inside((lx, ly), hwp, hlp, trace, p_ties):
            continue
        survivors.append(pt)

    # merge duplicates keeping the LAST occurrence: the candidate list is
    # ordered {intersections, p corners, g corners}, so coincident vertices
    # resolve to the most box-native representation (a shared corner ends up
    # carrying that box's own corner arithmetic). A candidate is dropped when
    # a later valid candidate sits within MERGE_TOL; testing against all
    # later candidates (kept or not) keeps this path aligned with the
    # loop-free batch evaluation
    deduped = []
    for j, pt in enumerate(survivors):
        px, py = value_of(pt[0]), value_of(pt[1])
        dup = False
        for q in survivors[j + 1 :]:
            d = math.sqrt((px - value_of(q[0])) ** 2 + (py - value_of(q[1])) ** 2)
            if d < MERGE_TOL:
                dup = True
                # exact coincidences are stable; only near-threshold merges
                # make the branch selection fragile
                if d > 0.5 * MERGE_TOL:
                    trace.tie(0.0)
            else:
                trace.tie(d - MERGE_TOL)
        if not dup:
            deduped.append(pt)
    return deduped


def _sort_ccw(vertices, trace: _Trace):
    n = len(vertices)
    if n < 3:
        return vertices
    cx = sum(value_of(p[0]) for p in vertices) / n
    cy = sum(value_of(p[1]) for p in vertices) / n
    keyed = []
    for pt in vertices:
        dx = value_of(pt[0]) - cx
        dy = value_of(pt[1]) - cy
        keyed.append((math.atan2(dy, dx), dx * dx + dy * dy, pt))
    keyed.sort(key=lambda k: (k[0], k[1]))
    angles = [k[0] for k in keyed]
    for i in range(1, n):
        trace.tie(angles[i] - angles[i - 1])
    trace.tie(angles[0] + 2.0 * math.pi - angles[-1])
    return [k[2] for k in keyed]


def _shoelace(vertices):
    acc = None
    n = len(vertices)
    for i in range(n):
        x0, y0 = vertices[i]
        x1, y1 = vertices[(i + 1) % n]
        term = x0 * y1 - x1 * y0
        acc = term if acc is None else acc + term
    return abs(acc * 0.5)


def _iou3d_impl(bp, bg, trace: _Trace):
    """Algorithm core, generic over float/Dual scalars.

    Returns (iou, loss, area, height_overlap, polygon_primal).
    """
    zero = bp[0] * 0.0
    verts = _polygon_vertices(bp, bg, trace)
    if len(verts) >= 3:
        verts = _sort_ccw(verts, trace)
        area = _shoelace(verts)
        trace.tie(value_of(area))
        if value_of(area) < DEGENERATE_AREA:
            area = zero
    else:
        area = zero
    poly = np.array([[value_of(p[0]), value_of(p[1])] for p in verts], dtype=np.float64).reshape(
        -1, 2
    )

    zp, hp = bp[2], bp[5]
    zg, hg = bg[2], bg[5]
    top_p, bot_p = zp + hp * 0.5, zp - hp * 0.5
    top_g, bot_g = zg + hg * 0.5, zg - hg * 0.5
    top = minimum(top_p, top_g)
    bot = maximum(bot_p, bot_g)
    trace.tie(abs(value_of(top_p) - value_of(top_g)))
    trace.tie(abs(value_of(bot_p) - value_of(bot_g)))
    hdiff = top - bot
    trace.tie(abs(value_of(hdiff)))
    height = hdiff if value_of(hdiff) > 0.0 else zero

    inter = area * height
    # volumes use the same face coordinates as the overlap so that identical
    # boxes land on exactly 1.0 despite rounding
    union = bp[3] * bp[4] * (top_p - bot_p) + bg[3] * bg[4] * (top_g - bot_g) - inter
    iou = inter / union
    loss = 1.0 - iou
    return iou, loss, area, height, poly


def _params(b: OrientedBox):
    return (b.x, b.y, b.z, b.w, b.l, b.h, b.r)


def bev_intersection_polygon(bp: OrientedBox, bg: OrientedBox) -> np.ndarray:
    """Vertices of the BEV intersection polygon in bg's local frame.

    Counterclockwise order, duplicates merged within 1e-7; disjoint boxes
    yield an empty array.
    """
    trace = _Trace()
    verts = _polygon_vertices(_params(bp), _params(bg), trace)
    if len(verts) >= 3:
        verts = _sort_ccw(verts, trace)
    return np.array([[p[0], p[1]] for p in verts], dtype=np.float64).reshape(-1, 2)


def shoelace_area(vertices) -> float:
    """Shoelace area of a counterclockwise-sorted convex polygon (>= 3 vertices)."""
    v = np.asarray(vertices, dtype=np.float64).reshape(-1, 2)
    if len(v) < 3:
        return 0.0
    return float(_shoelace([tuple(p) for p in v]))


def iou3d(bp: OrientedBox, bg: OrientedBox) -> IouResult:
    """3D IoU via BEV polygon area times vertical overlap."""
    trace = _Trace()
    iou, loss, area, height, poly = _iou3d_impl(_params(bp), _params(bg), trace)
    return IouResult(float(iou), float(loss), float(area), float(height), poly)


def iou3d_grad(bp: OrientedBox, bg: OrientedBox) -> IouGradResult:
    """Loss and its 14-parameter gradient via forward-mode duals.

    Seed order: (x, y, z, w, l, h, r) of bp then of bg. Configurations within
    1e-6 of a filtering/merge/sort tie are flagged non-smooth; the gradient is
    still returned.
    """
    vals = list(_params(bp)) + list(_params(bg))
    duals = [Dual.seed(v, 14, i) for i, v in enumerate(vals)]
    trace = _Trace()
    iou, loss, _, _, _ = _iou3d_impl(duals[:7], duals[7:], trace)
    if isinstance(loss, Dual):
        return IouGradResult(loss.val, loss.grad.copy(), value_of(iou), trace.smooth)
    return IouGradResult(float(loss), np.zeros(14), float(iou), trace.smooth)


def iou3d_batch(bp: np.ndarray, bg: np.ndarray) -> dict:
    """Vectorized Algorithm over (N, 7) box-parameter arrays.

    Runs the whole candidate/filter/dedupe/sort/area computation on fixed
    24-slot buffers with no per-pair Python loop. Returns arrays: iou, loss,
    bev_area, height_overlap, n_vertices.
    """
    bp = np.asarray(bp, dtype=np.float64).reshape(-1, 7)
    bg = np.asarray(bg, dtype=np.float64).reshape(-1, 7)
    if bp.shape != bg.shape:
        raise ValueError("box arrays must have matching shapes")
    n = len(bp)
    if n == 0:
        z = np.zeros(0)
        return {
            "iou": z,
            "loss": z,
            "bev_area": z,
            "height_overlap": z,
            "n_vertices": np.zeros(0, dtype=np.int64),
        }
    xp, yp, _, wp, lp, _, rp = bp.T
    xg, yg, _, wg, lg, _, rg = bg.T
    hwp, hlp = wp * 0.5, lp * 0.5
    hwg, hlg = wg * 0.5, lg * 0.5
    cd, sd = np.cos(rp - rg), np.sin(rp - rg)
    cg, sg = np.cos(rg), np.sin(rg)
    dx, dy = xp - xg, yp - yg
    ox = cg * dx + sg * dy
    oy = -sg * dx + cg * dy

    signs = np.array(_SIGNS)
    # p's corners in g frame: (N, 4, 2)
    px = signs[None, :, 0] * hwp[:, None]
    py = signs[None, :, 1] * hlp[:, None]
    cpx = cd[:, None] * px - sd[:, None] * py + ox[:, None]
    cpy = sd[:, None] * px + cd[:, None] * py + oy[:, None]
    cgx = signs[None, :, 0] * hwg[:, None]
    cgy = signs[None, :, 1] * hlg[:, None]

    cand = np.zeros((n, 24, 2))
    valid = np.zeros((n, 24), dtype=bool)
    bounds = (hwg, hwg, hlg, hlg)
    for e in range(4):
        ax_, ay = cpx[:, e], cpy[:, e]
        bx, by = cpx[:, (e + 1) % 4], cpy[:, (e + 1) % 4]
        exy = (ax_, ay, bx, by)
        for li, (axis, sign) in enumerate(_LINES):
            bound = bounds[li] * sign
            a_ax = exy[axis]
            b_ax = exy[2 + axis]
            denom = b_ax - a_ax
            ok = np.abs(denom) >= 1e-12
            t = np.where(ok, (bound - a_ax) / np.where(ok, denom, 1.0), -1.0)
            ok &= (t >= 0.0) & (t <= 1.0)
            slot = e * 4 + li
            cand[:, slot, 0] = ax_ + (bx - ax_) * t
            cand[:, slot, 1] = ay + (by - ay) * t
            valid[:, slot] = ok
    cand[:, 16:20, 0] = cpx
    cand[:, 16:20, 1] = cpy
    cand[:, 20:24, 0] = cgx
    cand[:, 20:24, 1] = cgy
    valid[:, 16:24] = True

    # filter against g's bounds
    valid &= (np.abs(cand[:, :, 0]) <= hwg[:, None] + INSIDE_TOL) & (
        np.abs(cand[:, :, 1]) <= hlg[:, None] + INSIDE_TOL
    )
    # re-express in p's frame and filter against p's bounds
    qx = cand[:, :, 0] - ox[:, None]
    qy = cand[:, :, 1] - oy[:, None]
    lx = cd[:, None] * qx + sd[:, None] * qy
    ly = -sd[:, None] * qx + cd[:, None] * qy
    valid &= (np.abs(lx) <= hwp[:, None] + INSIDE_TOL) & (np.abs(ly) <= hlp[:, None] + INSIDE_TOL)

    # dedupe keeping the last occurrence: drop slot j if a later valid slot i
    # sits within MERGE_TOL (mirrors the scalar path)
    diff = cand[:, :, None, :] - cand[:, None, :, :]
    d2 = diff[..., 0] ** 2 + diff[..., 1] ** 2  # (N, j, i)
    later = np.triu(np.ones((24, 24), dtype=bool), 1)
    dup = ((d2 < MERGE_TOL * MERGE_TOL) & valid[:, None, :] & later[None]).any(axis=2)
    valid &= ~dup

    m = valid.sum(axis=1)
    cx = np.where(m > 0, (cand[:, :, 0] * valid).sum(1) / np.maximum(m, 1), 0.0)
    cy = np.where(m > 0, (cand[:, :, 1] * valid).sum(1) / np.maximum(m, 1), 0.0)
    ang = np.where(valid, np.arctan2(cand[:, :, 1] - cy[:, None], cand[:, :, 0] - cx[:, None]), np.inf)
    r2 = np.where(
        valid, (cand[:, :, 0] - cx[:, None]) ** 2 + (cand[:, :, 1] - cy[:, None]) ** 2, np.inf
    )
    order = np.lexsort((r2, ang), axis=-1)
    sx = np.take_along_axis(cand[:, :, 0], order, axis=1)
    sy = np.take_along_axis(cand[:, :, 1], order, axis=1)

    pos = np.arange(24)[None, :]
    nxt = np.where(pos + 1 < m[:, None], pos + 1, 0)
    nx = np.take_along_axis(sx, nxt, axis=1)
    ny = np.take_along_axis(sy, nxt, axis=1)
    terms = np.where(pos < m[:, None], sx * ny - nx * sy, 0.0)
    area = 0.5 * np.abs(terms.sum(axis=1))
    area = np.where((m >= 3) & (area >= DEGENERATE_AREA), area, 0.0)

    zp, hp = bp[:, 2], bp[:, 5]
    zg, hg = bg[:, 2], bg[:, 5]
    top_p, bot_p = zp + hp * 0.5, zp - hp * 0.5
    top_g, bot_g = zg + hg * 0.5, zg - hg * 0.5
    height = np.maximum(0.0, np.minimum(top_p, top_g) - np.maximum(bot_p, bot_g))
    inter = area * height
    union = bp[:, 3] * bp[:, 4] * (top_p - bot_p) + bg[:, 3] * bg[:, 4] * (top_g - bot_g) - inter
    iou = inter / union
    return {
        "iou": iou,
        "loss": 1.0 - iou,
        "bev_area": area,
        "height_overlap": height,
        "n_vertices": m.astype(np.int64),
    }
