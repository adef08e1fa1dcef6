# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled hot kernels. Semantics match ``_pykernels`` exactly."""
import numpy as np
cimport numpy as cnp
from libc.math cimport cos, sin, sqrt, exp, log, fabs, INFINITY, isfinite
from libcpp.queue cimport priority_queue
from libcpp.pair cimport pair

cnp.import_array()

BACKEND = "cython"

cdef double _SQRT2 = sqrt(2.0)
cdef double _AREA_EPS = 1e-12


# ---------------------------------------------------------------------------
# Linear assignment
# ---------------------------------------------------------------------------

cdef void _lsa(const double[:, ::1] a, long[::1] col_of_row) noexcept:
    cdef Py_ssize_t n = a.shape[0], m = a.shape[1]
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef long[::1] p = np.zeros(m + 1, dtype=np.int64)
    cdef long[::1] way = np.zeros(m + 1, dtype=np.int64)
    cdef double[::1] minv = np.empty(m + 1)
    cdef char[::1] used = np.empty(m + 1, dtype=np.int8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            delta = INFINITY
            j1 = 0
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = a[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    for i in range(n):
        col_of_row[i] = -1
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1


def linear_assignment(cost):
    """Min-cost rectangular assignment; returns (rows, cols) int arrays."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    transposed = n > m
    c = np.ascontiguousarray(cost.T if transposed else cost)
    col_of_row = np.empty(c.shape[0], dtype=np.int64)
    _lsa(c, col_of_row)
    rows = np.arange(c.shape[0], dtype=np.int64)
    cols = col_of_row
    if transposed:
        rows, cols = cols, rows
        order = np.argsort(rows, kind="stable")
        rows, cols = rows[order], cols[order]
    return rows, cols


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn
# ---------------------------------------------------------------------------

def sinkhorn_log_forward(Z, log_mu, log_nu, int iters):
    cdef const double[:, ::1] z = np.ascontiguousarray(Z, dtype=np.float64)
    cdef const double[::1] lmu = np.ascontiguousarray(log_mu, dtype=np.float64)
    cdef const double[::1] lnu = np.ascontiguousarray(log_nu, dtype=np.float64)
    cdef Py_ssize_t n = z.shape[0], m = z.shape[1]
    u_hist_arr = np.empty((iters, n))
    v_hist_arr = np.empty((iters, m))
    cdef double[:, ::1] uh = u_hist_arr
    cdef double[:, ::1] vh = v_hist_arr
    cdef double[::1] u = np.zeros(n)
    cdef double[::1] v = np.zeros(m)
    cdef double[::1] colmax = np.empty(m)
    cdef double[::1] colsum = np.empty(m)
    cdef Py_ssize_t t, i, j
    cdef double mx, s, x
    for t in range(iters):
        for i in range(n):
            mx = -INFINITY
            for j in range(m):
                x = z[i, j] + v[j]
                if x > mx:
                    mx = x
            if not isfinite(mx):
                mx = 0.0
            s = 0.0
            for j in range(m):
                s += exp(z[i, j] + v[j] - mx)
            u[i] = lmu[i] - (mx + log(s))
            uh[t, i] = u[i]
        for j in range(m):
            colmax[j] = -INFINITY
            colsum[j] = 0.0
        for i in range(n):
            for j in range(m):
                x = z[i, j] + u[i]
                if x > colmax[j]:
                    colmax[j] = x
        for j in range(m):
            if not isfinite(colmax[j]):
                colmax[j] = 0.0
        for i in range(n):
            for j in range(m):
                colsum[j] += exp(z[i, j] + u[i] - colmax[j])
        for j in range(m):
            v[j] = lnu[j] - (colmax[j] + log(colsum[j]))
            vh[t, j] = v[j]
    return u_hist_arr, v_hist_arr


def sinkhorn_log_backward(Z, log_mu, log_nu, u_hist, v_hist, G):
    cdef const double[:, ::1] z = np.ascontiguousarray(Z, dtype=np.float64)
    cdef const double[::1] lmu = np.ascontiguousarray(log_mu, dtype=np.float64)
    cdef const double[::1] lnu = np.ascontiguousarray(log_nu, dtype=np.float64)
    cdef const double[:, ::1] uh = np.ascontiguousarray(u_hist, dtype=np.float64)
    cdef const double[:, ::1] vh = np.ascontiguousarray(v_hist, dtype=np.float64)
    cdef const double[:, ::1] g = np.ascontiguousarray(G, dtype=np.float64)
    cdef Py_ssize_t iters = uh.shape[0], n = z.shape[0], m = z.shape[1]
    gz_arr = np.array(G, dtype=np.float64, order="C", copy=True)
    cdef double[:, ::1] gz = gz_arr
    cdef double[::1] gu = np.zeros(n)
    cdef double[::1] gv = np.zeros(m)
    cdef double[::1] gv_next = np.zeros(m)
    cdef Py_ssize_t t, i, j
    cdef double q, vprev
    for i in range(n):
        for j in range(m):
            gu[i] += g[i, j]
            gv[j] += g[i, j]
    for t in range(iters - 1, -1, -1):
        for i in range(n):
            for j in range(m):
                q = exp(z[i, j] + uh[t, i] + vh[t, j] - lnu[j]) * gv[j]
                gz[i, j] -= q
                gu[i] -= q
        for j in range(m):
            gv_next[j] = 0.0
        for i in range(n):
            for j in range(m):
                vprev = vh[t - 1, j] if t > 0 else 0.0
                q = exp(z[i, j] + uh[t, i] + vprev - lmu[i]) * gu[i]
                gz[i, j] -= q
                gv_next[j] -= q
        for j in range(m):
            gv[j] = gv_next[j]
        for i in range(n):
            gu[i] = 0.0
    return gz_arr


# ---------------------------------------------------------------------------
# Ground-plane rectangle overlap and gravity-aligned box IoU
# ---------------------------------------------------------------------------

cdef inline void _corners(double cx, double cz, double hx, double hz, double yaw,
                          double* xs, double* zs) noexcept:
    cdef double c = cos(yaw), s = sin(yaw)
    cdef double lx[4]
    cdef double lz[4]
    lx[0] = hx; lz[0] = hz
    lx[1] = -hx; lz[1] = hz
    lx[2] = -hx; lz[2] = -hz
    lx[3] = hx; lz[3] = -hz
    cdef int k
    for k in range(4):
        xs[k] = cx + c * lx[k] + s * lz[k]
        zs[k] = cz - s * lx[k] + c * lz[k]


cdef double _rect_inter(double cx1, double cz1, double hx1, double hz1, double yaw1,
                        double cx2, double cz2, double hx2, double hz2, double yaw2) noexcept:
    if hx1 <= 0.0 or hz1 <= 0.0 or hx2 <= 0.0 or hz2 <= 0.0:
        return 0.0
    cdef double r = sqrt(hx1 * hx1 + hz1 * hz1) + sqrt(hx2 * hx2 + hz2 * hz2)
    if (cx1 - cx2) * (cx1 - cx2) + (cz1 - cz2) * (cz1 - cz2) > r * r:
        return 0.0
    # convex 4-gon clipped by 4 half-planes has at most 8 vertices
    cdef double px[16]
    cdef double pz[16]
    cdef double qx[16]
    cdef double qz[16]
    cdef double cxs[4]
    cdef double czs[4]
    cdef int k = 4, nk, e, idx, nxt
    cdef double ax, az, ex, ez, dp, dq, t, area
    _corners(cx1, cz1, hx1, hz1, yaw1, px, pz)
    _corners(cx2, cz2, hx2, hz2, yaw2, cxs, czs)
    for e in range(4):
        ax = cxs[e]; az = czs[e]
        ex = cxs[(e + 1) % 4] - ax
        ez = czs[(e + 1) % 4] - az
        nk = 0
        for idx in range(k):
            nxt = (idx + 1) % k
            dp = ex * (pz[idx] - az) - ez * (px[idx] - ax)
            dq = ex * (pz[nxt] - az) - ez * (px[nxt] - ax)
            if dp >= 0.0:
                qx[nk] = px[idx]; qz[nk] = pz[idx]; nk += 1
            if (dp >= 0.0) != (dq >= 0.0):
                t = dp / (dp - dq)
                qx[nk] = px[idx] + t * (px[nxt] - px[idx])
                qz[nk] = pz[idx] + t * (pz[nxt] - pz[idx])
                nk += 1
        k = nk
        if k < 3:
            return 0.0
        for idx in range(k):
            px[idx] = qx[idx]; pz[idx] = qz[idx]
    area = 0.0
    for idx in range(k):
        nxt = (idx + 1) % k
        area += px[idx] * pz[nxt] - px[nxt] * pz[idx]
    area = fabs(0.5 * area)
    return area if area > _AREA_EPS else 0.0


def rect_intersection_area(double cx1, double cz1, double hx1, double hz1, double yaw1,
                           double cx2, double cz2, double hx2, double hz2, double yaw2):
    return _rect_inter(cx1, cz1, hx1, hz1, yaw1, cx2, cz2, hx2, hz2, yaw2)


def pairwise_iou3d(boxes_a, boxes_b):
    """IoU matrix for (n, 7) and (m, 7) arrays of [cx, cy, cz, sx, sy, sz, yaw]."""
    cdef const double[:, ::1] a = np.ascontiguousarray(
        np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7))
    cdef const double[:, ::1] b = np.ascontiguousarray(
        np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7))
    out_arr = np.zeros((a.shape[0], b.shape[0]))
    cdef double[:, ::1] out = out_arr
    cdef Py_ssize_t i, j
    cdef double lo, hi, inter, va, vb, iou
    for i in range(a.shape[0]):
        va = a[i, 3] * a[i, 4] * a[i, 5]
        for j in range(b.shape[0]):
            lo = max(a[i, 1] - 0.5 * a[i, 4], b[j, 1] - 0.5 * b[j, 4])
            hi = min(a[i, 1] + 0.5 * a[i, 4], b[j, 1] + 0.5 * b[j, 4])
            if hi <= lo:
                continue
            inter = _rect_inter(a[i, 0], a[i, 2], 0.5 * a[i, 3], 0.5 * a[i, 5], a[i, 6],
                                b[j, 0], b[j, 2], 0.5 * b[j, 3], 0.5 * b[j, 5], b[j, 6]) * (hi - lo)
            if inter <= 0.0:
                continue
            vb = b[j, 3] * b[j, 4] * b[j, 5]
            iou = inter / (va + vb - inter)
            out[i, j] = min(1.0, max(0.0, iou))
    return out_arr


# ---------------------------------------------------------------------------
# Grid shortest path
# ---------------------------------------------------------------------------

cdef int _DR[8]
cdef int _DC[8]
_DR[:] = [-1, 1, 0, 0, -1, -1, 1, 1]
_DC[:] = [0, 0, -1, 1, -1, 1, -1, 1]


cdef inline double _octile(long r, long c, long gr, long gc) noexcept:
    cdef long dr = r - gr if r > gr else gr - r
    cdef long dc = c - gc if c > gc else gc - c
    cdef long mn = dr if dr < dc else dc
    return <double>(dr + dc) + (_SQRT2 - 2.0) * <double>mn


def grid_astar(free, start, goal):
    """8-connected A* over a boolean free-space grid (see ``_pykernels``)."""
    free_arr = np.ascontiguousarray(free, dtype=np.uint8)
    cdef const unsigned char[:, ::1] grid = free_arr
    cdef long H = grid.shape[0], W = grid.shape[1]
    cdef long sr = int(start[0]), sc = int(start[1])
    cdef long gr = int(goal[0]), gc = int(goal[1])
    if not (0 <= sr < H and 0 <= sc < W and 0 <= gr < H and 0 <= gc < W):
        return np.zeros((0, 2), np.int64)
    if not grid[sr, sc] or not grid[gr, gc]:
        return np.zeros((0, 2), np.int64)
    cdef long n = H * W
    g_arr = np.full(n, np.inf)
    parent_arr = np.full(n, -1, dtype=np.int64)
    closed_arr = np.zeros(n, dtype=np.uint8)
    cdef double[::1] g = g_arr
    cdef long[::1] parent = parent_arr
    cdef unsigned char[::1] closed = closed_arr
    cdef long s = sr * W + sc, goal_idx = gr * W + gc
    cdef priority_queue[pair[double, long]] heap
    cdef pair[double, long] top
    cdef long idx, r, c, rr, cc, nidx, k
    cdef double gi, ng, step
    g[s] = 0.0
    heap.push(pair[double, long](-_octile(sr, sc, gr, gc), -s))
    while not heap.empty():
        top = heap.top()
        heap.pop()
        idx = -top.second
        if closed[idx]:
            continue
        closed[idx] = 1
        if idx == goal_idx:
            break
        r = idx // W
        c = idx % W
        gi = g[idx]
        for k in range(8):
            rr = r + _DR[k]
            cc = c + _DC[k]
            if rr < 0 or rr >= H or cc < 0 or cc >= W:
                continue
            nidx = rr * W + cc
            if not grid[rr, cc] or closed[nidx]:
                continue
            if _DR[k] != 0 and _DC[k] != 0:
                if not grid[r, cc] or not grid[rr, c]:
                    continue
                step = _SQRT2
            else:
                step = 1.0
            ng = gi + step
            if ng < g[nidx]:
                g[nidx] = ng
                parent[nidx] = idx
                heap.push(pair[double, long](-(ng + _octile(rr, cc, gr, gc)), -nidx))
    if not closed[goal_idx]:
        return np.zeros((0, 2), np.int64)
    path = []
    idx = goal_idx
    while idx != -1:
        path.append((idx // W, idx % W))
        idx = parent[idx]
    path.reverse()
    return np.asarray(path, dtype=np.int64).reshape(-1, 2)
