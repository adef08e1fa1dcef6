"""Interpreted implementations of the hot kernels.

These mirror ``_ckernels.pyx`` operation for operation (same loop order,
same tie-breaking) so both backends return identical discrete results.
"""
import heapq
import math

import numpy as np

BACKEND = "python"

_SQRT2 = math.sqrt(2.0)
_AREA_EPS = 1e-12


# ---------------------------------------------------------------------------
# Linear assignment
# ---------------------------------------------------------------------------

def _lsa_rows_le_cols(cost):
    n, m = len(cost), len(cost[0])
    inf = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            delta = inf
            j1 = 0
            row = cost[i0 - 1]
            ui0 = u[i0]
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    col_of_row = [-1] * n
    for j in range(1, m + 1):
        if p[j]:
            col_of_row[p[j] - 1] = j - 1
    return col_of_row


def linear_assignment(cost):
    """Min-cost rectangular assignment; returns (rows, cols) int arrays."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n == 0 or m == 0:
        return np.zeros(0, np.int64), np.zeros(0, np.int64)
    transposed = n > m
    c = cost.T if transposed else cost
    col_of_row = _lsa_rows_le_cols(c.tolist())
    rows = np.arange(len(col_of_row), dtype=np.int64)
    cols = np.asarray(col_of_row, dtype=np.int64)
    if transposed:
        rows, cols = cols, rows
        order = np.argsort(rows, kind="stable")
        rows, cols = rows[order], cols[order]
    return rows, cols


# ---------------------------------------------------------------------------
# Log-domain Sinkhorn (forward history + unrolled backward)
# ---------------------------------------------------------------------------

def _lse(x, axis):
    mx = np.max(x, axis=axis, keepdims=True)
    mx = np.where(np.isfinite(mx), mx, 0.0)
    return np.squeeze(mx, axis=axis) + np.log(np.sum(np.exp(x - mx), axis=axis))


def sinkhorn_log_forward(Z, log_mu, log_nu, iters):
    """Run ``iters`` alternating row/column log-normalizations.

    Returns the per-iteration row and column potentials, shapes
    (iters, n) and (iters, m). The final log-plan is Z + u[-1][:, None] + v[-1].
    """
    n, m = Z.shape
    u_hist = np.empty((iters, n))
    v_hist = np.empty((iters, m))
    v = np.zeros(m)
    for t in range(iters):
        u = log_mu - _lse(Z + v[None, :], axis=1)
        v = log_nu - _lse(Z + u[:, None], axis=0)
        u_hist[t] = u
        v_hist[t] = v
    return u_hist, v_hist


def sinkhorn_log_backward(Z, log_mu, log_nu, u_hist, v_hist, G):
    """Gradient w.r.t. Z of a loss with gradient G w.r.t. the final log-plan."""
    iters = u_hist.shape[0]
    gZ = G.copy()
    gu = G.sum(axis=1)
    gv = G.sum(axis=0)
    for t in range(iters - 1, -1, -1):
        u = u_hist[t]
        v = v_hist[t]
        # v_t = log_nu - lse_i(Z + u_t): column softmax Q
        Q = np.exp(Z + u[:, None] + v[None, :] - log_nu[None, :])
        Qg = Q * gv[None, :]
        gZ -= Qg
        gu = gu - Qg.sum(axis=1)
        # u_t = log_mu - lse_j(Z + v_{t-1}): row softmax R
        v_prev = v_hist[t - 1] if t > 0 else np.zeros_like(v)
        R = np.exp(Z + u[:, None] + v_prev[None, :] - log_mu[:, None])
        Rg = R * gu[:, None]
        gZ -= Rg
        gv = -Rg.sum(axis=0)
        gu = np.zeros_like(gu)
    return gZ


# ---------------------------------------------------------------------------
# Ground-plane rectangle overlap and gravity-aligned box IoU
# ---------------------------------------------------------------------------

def _corners(cx, cz, hx, hz, yaw):
    c, s = math.cos(yaw), math.sin(yaw)
    pts = []
    for lx, lz in ((hx, hz), (-hx, hz), (-hx, -hz), (hx, -hz)):
        pts.append((cx + c * lx + s * lz, cz - s * lx + c * lz))
    return pts


def _clip(subject, a, b):
    out = []
    ax, az = a
    ex, ez = b[0] - ax, b[1] - az
    k = len(subject)
    for idx in range(k):
        p = subject[idx]
        q = subject[(idx + 1) % k]
        dp = ex * (p[1] - az) - ez * (p[0] - ax)
        dq = ex * (q[1] - az) - ez * (q[0] - ax)
        if dp >= 0.0:
            out.append(p)
        if (dp >= 0.0) != (dq >= 0.0):
            t = dp / (dp - dq)
            out.append((p[0] + t * (q[0] - p[0]), p[1] + t * (q[1] - p[1])))
    return out


def _area(poly):
    s = 0.0
    k = len(poly)
    for idx in range(k):
        x0, z0 = poly[idx]
        x1, z1 = poly[(idx + 1) % k]
        s += x0 * z1 - x1 * z0
    return 0.5 * s


def rect_intersection_area(cx1, cz1, hx1, hz1, yaw1, cx2, cz2, hx2, hz2, yaw2):
    if hx1 <= 0.0 or hz1 <= 0.0 or hx2 <= 0.0 or hz2 <= 0.0:
        return 0.0
    # cheap reject on circumscribed circles
    r = math.hypot(hx1, hz1) + math.hypot(hx2, hz2)
    if (cx1 - cx2) ** 2 + (cz1 - cz2) ** 2 > r * r:
        return 0.0
    poly = _corners(cx1, cz1, hx1, hz1, yaw1)
    clipper = _corners(cx2, cz2, hx2, hz2, yaw2)
    for idx in range(4):
        poly = _clip(poly, clipper[idx], clipper[(idx + 1) % 4])
        if len(poly) < 3:
            return 0.0
    a = abs(_area(poly))
    return a if a > _AREA_EPS else 0.0


def pairwise_iou3d(boxes_a, boxes_b):
    """IoU matrix for (n, 7) and (m, 7) arrays of [cx, cy, cz, sx, sy, sz, yaw]."""
    boxes_a = np.asarray(boxes_a, dtype=np.float64).reshape(-1, 7)
    boxes_b = np.asarray(boxes_b, dtype=np.float64).reshape(-1, 7)
    out = np.zeros((len(boxes_a), len(boxes_b)))
    for i, a in enumerate(boxes_a.tolist()):
        va = a[3] * a[4] * a[5]
        for j, b in enumerate(boxes_b.tolist()):
            lo = max(a[1] - 0.5 * a[4], b[1] - 0.5 * b[4])
            hi = min(a[1] + 0.5 * a[4], b[1] + 0.5 * b[4])
            if hi <= lo:
                continue
            inter = rect_intersection_area(
                a[0], a[2], 0.5 * a[3], 0.5 * a[5], a[6],
                b[0], b[2], 0.5 * b[3], 0.5 * b[5], b[6],
            ) * (hi - lo)
            if inter <= 0.0:
                continue
            vb = b[3] * b[4] * b[5]
            out[i, j] = min(1.0, max(0.0, inter / (va + vb - inter)))
    return out


# ---------------------------------------------------------------------------
# Grid shortest path
# ---------------------------------------------------------------------------

_NEIGHBORS = ((-1, 0), (1, 0), (0, -1), (0, 1), (-1, -1), (-1, 1), (1, -1), (1, 1))


def grid_astar(free, start, goal):
    """8-connected A* over a boolean free-space grid.

    Diagonal moves may not cut blocked corners. Returns an (k, 2) int array of
    (row, col) cells from start to goal inclusive, or an empty array when the
    goal is unreachable.
    """
    free = np.ascontiguousarray(free, dtype=np.uint8)
    H, W = free.shape
    sr, sc = int(start[0]), int(start[1])
    gr, gc = int(goal[0]), int(goal[1])
    if not (0 <= sr < H and 0 <= sc < W and 0 <= gr < H and 0 <= gc < W):
        return np.zeros((0, 2), np.int64)
    if not free[sr, sc] or not free[gr, gc]:
        return np.zeros((0, 2), np.int64)
    grid = free.ravel().tolist()
    n = H * W
    inf = float("inf")
    g = [inf] * n
    parent = [-1] * n
    closed = [False] * n
    s = sr * W + sc
    goal_idx = gr * W + gc
    g[s] = 0.0

    def h(r, c):
        dr = abs(r - gr)
        dc = abs(c - gc)
        return (dr + dc) + (_SQRT2 - 2.0) * min(dr, dc)

    heap = [(h(sr, sc), s)]
    while heap:
        f, idx = heapq.heappop(heap)
        if closed[idx]:
            continue
        closed[idx] = True
        if idx == goal_idx:
            break
        r, c = divmod(idx, W)
        gi = g[idx]
        for dr, dc in _NEIGHBORS:
            rr, cc = r + dr, c + dc
            if rr < 0 or rr >= H or cc < 0 or cc >= W:
                continue
            nidx = rr * W + cc
            if not grid[nidx] or closed[nidx]:
                continue
            if dr != 0 and dc != 0:
                if not grid[r * W + cc] or not grid[rr * W + c]:
                    continue
                step = _SQRT2
            else:
                step = 1.0
            ng = gi + step
            if ng < g[nidx]:
                g[nidx] = ng
                parent[nidx] = idx
                heapq.heappush(heap, (ng + h(rr, cc), nidx))
    if not closed[goal_idx]:
        return np.zeros((0, 2), np.int64)
    path = []
    idx = goal_idx
    while idx != -1:
        path.append(divmod(idx, W))
        idx = parent[idx]
    path.reverse()
    return np.asarray(path, dtype=np.int64).reshape(-1, 2)
