# cython: boundscheck=False, wraparound=False, cdivision=True
"""Compiled hot kernels: slot claiming, CSR grid builds, radius queries and
voxel scatter. Must stay bit-identical to `voxdet.backends.pykernels`."""

import numpy as np

cimport numpy as cnp
from libc.math cimport floor
from libc.stdlib cimport free, malloc, qsort

cnp.import_array()

NAME = "compiled"

cdef cnp.int32_t EMPTY32 = 2147483647


cdef int _cmp_i64(const void* a, const void* b) noexcept nogil:
    cdef long long x = (<const long long*> a)[0]
    cdef long long y = (<const long long*> b)[0]
    if x < y:
        return -1
    if x > y:
        return 1
    return 0


cdef struct KeyIdx:
    long long key
    long long idx


cdef int _cmp_keyidx(const void* a, const void* b) noexcept nogil:
    cdef KeyIdx x = (<const KeyIdx*> a)[0]
    cdef KeyIdx y = (<const KeyIdx*> b)[0]
    if x.key < y.key:
        return -1
    if x.key > y.key:
        return 1
    if x.idx < y.idx:
        return -1
    if x.idx > y.idx:
        return 1
    return 0


def claim_first(const cnp.int64_t[::1] flat, cnp.int32_t[::1] buf):
    """First-writer-wins slot claiming; see pykernels.claim_first."""
    cdef Py_ssize_t n = flat.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    cdef long long* touched = <long long*> malloc(n * sizeof(long long))
    if touched == NULL:
        raise MemoryError()
    cdef Py_ssize_t i, m = 0
    cdef long long s
    with nogil:
        for i in range(n):
            s = flat[i]
            if buf[s] == EMPTY32:
                buf[s] = <cnp.int32_t> i
                touched[m] = s
                m += 1
        qsort(touched, m, sizeof(long long), _cmp_i64)
    out = np.empty(m, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = out
    with nogil:
        for i in range(m):
            ov[i] = buf[touched[i]]
            buf[touched[i]] = EMPTY32
    free(touched)
    return out


def group_sparse(const cnp.int64_t[::1] keys):
    """CSR partition by key; see pykernels.group_sparse."""
    cdef Py_ssize_t n = keys.shape[0]
    order = np.empty(n, dtype=np.int64)
    if n == 0:
        return order, np.zeros(0, dtype=np.int64), np.zeros(1, dtype=np.int64)
    cdef KeyIdx* pairs = <KeyIdx*> malloc(n * sizeof(KeyIdx))
    if pairs == NULL:
        raise MemoryError()
    cdef cnp.int64_t[::1] ov = order
    cdef Py_ssize_t i, m = 0
    with nogil:
        for i in range(n):
            pairs[i].key = keys[i]
            pairs[i].idx = i
        qsort(pairs, n, sizeof(KeyIdx), _cmp_keyidx)
        for i in range(n):
            ov[i] = pairs[i].idx
        m = 1
        for i in range(1, n):
            if pairs[i].key != pairs[i - 1].key:
                m += 1
    ukeys = np.empty(m, dtype=np.int64)
    starts = np.empty(m + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] uv = ukeys
    cdef cnp.int64_t[::1] sv = starts
    cdef Py_ssize_t g = 0
    with nogil:
        uv[0] = pairs[0].key
        sv[0] = 0
        for i in range(1, n):
            if pairs[i].key != pairs[i - 1].key:
                g += 1
                uv[g] = pairs[i].key
                sv[g] = i
        sv[m] = n
    free(pairs)
    return order, ukeys, starts


def group_dense(const cnp.int64_t[::1] flat, Py_ssize_t n_slots):
    """Counting-sort CSR over a dense slot range; see pykernels.group_dense."""
    cdef Py_ssize_t n = flat.shape[0]
    order = np.empty(n, dtype=np.int64)
    starts = np.zeros(n_slots + 1, dtype=np.int64)
    cdef cnp.int64_t[::1] ov = order
    cdef cnp.int64_t[::1] sv = starts
    cdef long long* cursor = <long long*> malloc((n_slots if n_slots > 0 else 1) * sizeof(long long))
    if cursor == NULL:
        raise MemoryError()
    cdef Py_ssize_t i
    cdef long long s
    with nogil:
        for i in range(n):
            sv[flat[i] + 1] += 1
        for i in range(n_slots):
            sv[i + 1] += sv[i]
            cursor[i] = sv[i]
        for i in range(n):
            s = flat[i]
            ov[cursor[s]] = i
            cursor[s] += 1
    free(cursor)
    return order, starts


cdef inline Py_ssize_t _bsearch_left(const cnp.int64_t* keys, Py_ssize_t m, long long v) noexcept nogil:
    cdef Py_ssize_t lo = 0, hi = m, mid
    while lo < hi:
        mid = (lo + hi) >> 1
        if keys[mid] < v:
            lo = mid + 1
        else:
            hi = mid
    return lo


cdef Py_ssize_t _query_one(
    const double* pts,
    int mode,
    const cnp.int64_t* order,
    const cnp.int64_t* ukeys, Py_ssize_t nkeys,
    const cnp.int64_t* starts,
    const cnp.int64_t* min_cell, const cnp.int64_t* dims,
    const cnp.int64_t* lo_bound, const cnp.int64_t* hi_bound,
    double cell, double cx, double cy, double cz, double radius,
    long long* out_buf,
) noexcept nogil:
    """Collect neighbor indices (ascending) into out_buf; returns the count."""
    cdef long long lo0, lo1, lo2, hi0, hi1, hi2
    cdef long long ci, cj, base, lo_key, hi_key
    cdef Py_ssize_t a, b, g, t, m = 0
    cdef double dx, dy, dz, r2 = radius * radius
    cdef long long p
    lo0 = <long long> floor((cx - radius) / cell)
    lo1 = <long long> floor((cy - radius) / cell)
    lo2 = <long long> floor((cz - radius) / cell)
    hi0 = <long long> floor((cx + radius) / cell)
    hi1 = <long long> floor((cy + radius) / cell)
    hi2 = <long long> floor((cz + radius) / cell)
    if lo0 < lo_bound[0]:
        lo0 = lo_bound[0]
    if lo1 < lo_bound[1]:
        lo1 = lo_bound[1]
    if lo2 < lo_bound[2]:
        lo2 = lo_bound[2]
    if hi0 > hi_bound[0]:
        hi0 = hi_bound[0]
    if hi1 > hi_bound[1]:
        hi1 = hi_bound[1]
    if hi2 > hi_bound[2]:
        hi2 = hi_bound[2]
    if lo0 > hi0 or lo1 > hi1 or lo2 > hi2:
        return 0
    for ci in range(lo0, hi0 + 1):
        for cj in range(lo1, hi1 + 1):
            if mode == 0:
                lo_key = ((ci + (1 << 20)) << 42) | ((cj + (1 << 20)) << 21) | (lo2 + (1 << 20))
                hi_key = lo_key + (hi2 - lo2)
                a = _bsearch_left(ukeys, nkeys, lo_key)
                b = _bsearch_left(ukeys, nkeys, hi_key + 1)
                for g in range(a, b):
                    for t in range(starts[g], starts[g + 1]):
                        p = order[t]
                        dx = pts[3 * p] - cx
                        dy = pts[3 * p + 1] - cy
                        dz = pts[3 * p + 2] - cz
                        if dx * dx + dy * dy + dz * dz <= r2:
                            out_buf[m] = p
                            m += 1
            else:
                base = ((ci - min_cell[0]) * dims[1] + (cj - min_cell[1])) * dims[2] - min_cell[2]
                for t in range(starts[base + lo2], starts[base + hi2 + 1]):
                    p = order[t]
                    dx = pts[3 * p] - cx
                    dy = pts[3 * p + 1] - cy
                    dz = pts[3 * p + 2] - cz
                    if dx * dx + dy * dy + dz * dz <= r2:
                        out_buf[m] = p
                        m += 1
    qsort(out_buf, m, sizeof(long long), _cmp_i64)
    return m


cdef inline const cnp.int64_t* _i64ptr(const cnp.int64_t[::1] v):
    if v.shape[0] == 0:
        return NULL
    return &v[0]


cdef class _GridView:
    """Borrowed array views for one accel grid, shared by the query kernels."""
    cdef int mode
    cdef const cnp.int64_t[::1] order
    cdef const cnp.int64_t[::1] ukeys
    cdef const cnp.int64_t[::1] starts
    cdef const cnp.int64_t[::1] min_cell
    cdef const cnp.int64_t[::1] dims
    cdef const cnp.int64_t[::1] lo_bound
    cdef const cnp.int64_t[::1] hi_bound
    cdef double cell


cdef _GridView _unpack(grid):
    cdef _GridView gv = _GridView()
    one = np.zeros(1, dtype=np.int64)
    if grid[0] == "sparse":
        gv.mode = 0
        gv.order = np.ascontiguousarray(grid[1], dtype=np.int64)
        gv.ukeys = np.ascontiguousarray(grid[2], dtype=np.int64)
        gv.starts = np.ascontiguousarray(grid[3], dtype=np.int64)
        gv.cell = grid[4]
        gv.min_cell = one
        gv.dims = one
        gv.lo_bound = np.ascontiguousarray(grid[5][0], dtype=np.int64)
        gv.hi_bound = np.ascontiguousarray(grid[5][1], dtype=np.int64)
    else:
        gv.mode = 1
        gv.order = np.ascontiguousarray(grid[1], dtype=np.int64)
        gv.starts = np.ascontiguousarray(grid[2], dtype=np.int64)
        gv.ukeys = one
        gv.min_cell = np.ascontiguousarray(grid[3], dtype=np.int64)
        gv.dims = np.ascontiguousarray(grid[4], dtype=np.int64)
        gv.cell = grid[5]
        gv.lo_bound = np.ascontiguousarray(grid[6][0], dtype=np.int64)
        gv.hi_bound = np.ascontiguousarray(grid[6][1], dtype=np.int64)
    return gv


def radius_query(const cnp.double_t[:, ::1] points, const cnp.double_t[:, ::1] centers,
                 double radius, grid):
    """Per-center neighbor lists; see pykernels.radius_query."""
    cdef _GridView gv = _unpack(grid)
    cdef Py_ssize_t q = centers.shape[0]
    cdef Py_ssize_t npts = points.shape[0]
    counts = np.zeros(q, dtype=np.int64)
    cdef cnp.int64_t[::1] cv = counts
    cdef long long* scratch = <long long*> malloc((npts if npts > 0 else 1) * sizeof(long long))
    if scratch == NULL:
        raise MemoryError()
    cdef const double* pp = NULL
    if npts > 0:
        pp = &points[0, 0]
    cdef const cnp.int64_t* g_order = _i64ptr(gv.order)
    cdef const cnp.int64_t* g_ukeys = _i64ptr(gv.ukeys)
    cdef const cnp.int64_t* g_starts = _i64ptr(gv.starts)
    cdef const cnp.int64_t* g_min = _i64ptr(gv.min_cell)
    cdef const cnp.int64_t* g_dims = _i64ptr(gv.dims)
    cdef const cnp.int64_t* g_lo = _i64ptr(gv.lo_bound)
    cdef const cnp.int64_t* g_hi = _i64ptr(gv.hi_bound)
    cdef Py_ssize_t nkeys = gv.ukeys.shape[0] if gv.mode == 0 else 0
    parts = []
    cdef Py_ssize_t i, m, t
    cdef cnp.int64_t[::1] av
    for i in range(q):
        with nogil:
            m = _query_one(pp, gv.mode, g_order, g_ukeys, nkeys, g_starts,
                           g_min, g_dims, g_lo, g_hi, gv.cell,
                           centers[i, 0], centers[i, 1], centers[i, 2],
                           radius, scratch)
        cv[i] = m
        arr = np.empty(m, dtype=np.int64)
        if m > 0:
            av = arr
            for t in range(m):
                av[t] = scratch[t]
        parts.append(arr)
    free(scratch)
    indices = np.concatenate(parts) if parts else np.zeros(0, dtype=np.int64)
    return counts, indices


def voxelize_batch(const cnp.double_t[:, ::1] points, const cnp.double_t[:, ::1] feats,
                   const cnp.double_t[:, ::1] centers, double radius, Py_ssize_t k,
                   grid, long long cap=-1):
    """Average-pooled voxel scatter; see pykernels.voxelize_batch."""
    cdef _GridView gv = _unpack(grid)
    cdef Py_ssize_t q = centers.shape[0]
    cdef Py_ssize_t npts = points.shape[0]
    cdef Py_ssize_t c = feats.shape[1]
    cdef Py_ssize_t kk = k * k * k
    cdef double edge = 2.0 * radius / k
    out = np.zeros((q, kk, c), dtype=np.float64)
    vox_counts = np.zeros((q, kk), dtype=np.int64)
    cdef cnp.double_t[:, :, ::1] ov = out
    cdef cnp.int64_t[:, ::1] cntv = vox_counts
    cdef long long* scratch = <long long*> malloc((npts if npts > 0 else 1) * sizeof(long long))
    if scratch == NULL:
        raise MemoryError()
    cdef const double* pp = NULL
    if npts > 0:
        pp = &points[0, 0]
    cdef const cnp.int64_t* g_order = _i64ptr(gv.order)
    cdef const cnp.int64_t* g_ukeys = _i64ptr(gv.ukeys)
    cdef const cnp.int64_t* g_starts = _i64ptr(gv.starts)
    cdef const cnp.int64_t* g_min = _i64ptr(gv.min_cell)
    cdef const cnp.int64_t* g_dims = _i64ptr(gv.dims)
    cdef const cnp.int64_t* g_lo = _i64ptr(gv.lo_bound)
    cdef const cnp.int64_t* g_hi = _i64ptr(gv.hi_bound)
    cdef Py_ssize_t nkeys = gv.ukeys.shape[0] if gv.mode == 0 else 0
    cdef Py_ssize_t i, j, t, m
    cdef long long p, vi0, vi1, vi2, flat
    cdef double cx, cy, cz
    with nogil:
        for i in range(q):
            cx = centers[i, 0]
            cy = centers[i, 1]
            cz = centers[i, 2]
            m = _query_one(pp, gv.mode, g_order, g_ukeys, nkeys, g_starts,
                           g_min, g_dims, g_lo, g_hi, gv.cell,
                           cx, cy, cz, radius, scratch)
            for t in range(m):
                p = scratch[t]
                vi0 = <long long> floor((points[p, 0] - cx + radius) / edge)
                vi1 = <long long> floor((points[p, 1] - cy + radius) / edge)
                vi2 = <long long> floor((points[p, 2] - cz + radius) / edge)
                if vi0 < 0:
                    vi0 = 0
                if vi0 > k - 1:
                    vi0 = k - 1
                if vi1 < 0:
                    vi1 = 0
                if vi1 > k - 1:
                    vi1 = k - 1
                if vi2 < 0:
                    vi2 = 0
                if vi2 > k - 1:
                    vi2 = k - 1
                flat = (vi0 * k + vi1) * k + vi2
                if cap >= 0 and cntv[i, flat] >= cap:
                    continue
                for j in range(c):
                    ov[i, flat, j] += feats[p, j]
                cntv[i, flat] += 1
            for t in range(kk):
                if cntv[i, t] > 0:
                    for j in range(c):
                        ov[i, t, j] /= cntv[i, t]
    free(scratch)
    return out.reshape(q, k, k, k, c), vox_counts
