"""Compiled and interpreted kernels agree, and each matches an external oracle.

The compiled backend is optional; its comparisons skip when the extension
is not built.
"""
from __future__ import annotations

import math

import numpy as np
import pytest
from scipy.optimize import linear_sum_assignment
from scipy.sparse import lil_matrix
from scipy.sparse.csgraph import dijkstra

from reid3d import _kernels

BACKENDS = _kernels.available_backends()
compiled = pytest.mark.skipif("cython" not in BACKENDS, reason="compiled extension not built")


def test_backend_selected_at_import():
    assert _kernels.BACKEND in BACKENDS
    assert _kernels.linear_assignment is BACKENDS[_kernels.BACKEND].linear_assignment


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_lsa_matches_scipy(backend):
    k = BACKENDS[backend]
    rng = np.random.default_rng(0)
    for _ in range(100):
        n, m = rng.integers(1, 12, size=2)
        cost = rng.normal(size=(n, m)) if rng.random() < 0.5 else rng.integers(0, 4, size=(n, m)).astype(float)
        r, c = k.linear_assignment(cost)
        r2, c2 = linear_sum_assignment(cost)
        assert len(r) == min(n, m)
        assert cost[r, c].sum() == pytest.approx(cost[r2, c2].sum(), abs=1e-9)


@compiled
def test_lsa_backends_identical():
    rng = np.random.default_rng(1)
    for _ in range(50):
        cost = rng.normal(size=tuple(rng.integers(1, 15, size=2)))
        a = BACKENDS["python"].linear_assignment(cost)
        b = BACKENDS["cython"].linear_assignment(cost)
        np.testing.assert_array_equal(a[0], b[0])
        np.testing.assert_array_equal(a[1], b[1])


def _sk_inputs(rng, mA, mB):
    Z = rng.normal(size=(mA + 1, mB + 1)) * 2
    log_mu = np.zeros(mA + 1)
    log_mu[-1] = math.log(mB)
    log_nu = np.zeros(mB + 1)
    log_nu[-1] = math.log(mA)
    return Z, log_mu, log_nu


@compiled
def test_sinkhorn_backends_agree():
    rng = np.random.default_rng(2)
    for _ in range(20):
        Z, lm, ln = _sk_inputs(rng, *rng.integers(1, 9, size=2))
        u1, v1 = BACKENDS["python"].sinkhorn_log_forward(Z, lm, ln, 50)
        u2, v2 = BACKENDS["cython"].sinkhorn_log_forward(Z, lm, ln, 50)
        np.testing.assert_allclose(u1, u2, rtol=1e-12, atol=1e-12)
        np.testing.assert_allclose(v1, v2, rtol=1e-12, atol=1e-12)
        G = rng.normal(size=Z.shape)
        g1 = BACKENDS["python"].sinkhorn_log_backward(Z, lm, ln, u1, v1, G)
        g2 = BACKENDS["cython"].sinkhorn_log_backward(Z, lm, ln, u1, v1, G)
        np.testing.assert_allclose(g1, g2, rtol=1e-10, atol=1e-12)


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_sinkhorn_backward_finite_difference(backend):
    k = BACKENDS[backend]
    rng = np.random.default_rng(3)
    Z, lm, ln = _sk_inputs(rng, 3, 4)
    G = rng.normal(size=Z.shape)

    def f(Zp):
        u, v = k.sinkhorn_log_forward(Zp, lm, ln, 30)
        return float((G * (Zp + u[-1][:, None] + v[-1][None, :])).sum())

    u, v = k.sinkhorn_log_forward(Z, lm, ln, 30)
    grad = k.sinkhorn_log_backward(Z, lm, ln, u, v, G)
    h = 1e-6
    for idx in np.ndindex(Z.shape):
        Zp, Zm = Z.copy(), Z.copy()
        Zp[idx] += h
        Zm[idx] -= h
        assert grad[idx] == pytest.approx((f(Zp) - f(Zm)) / (2 * h), rel=1e-5, abs=1e-7)


@compiled
def test_iou_backends_agree():
    rng = np.random.default_rng(4)
    boxes = np.column_stack([rng.uniform(-2, 2, (40, 3)), rng.uniform(0.2, 2, (40, 3)), rng.uniform(-4, 4, 40)])
    a = BACKENDS["python"].pairwise_iou3d(boxes, boxes[::-1])
    b = BACKENDS["cython"].pairwise_iou3d(boxes, boxes[::-1])
    np.testing.assert_allclose(a, b, atol=1e-12)
    for i in range(10):
        args = (*rng.normal(size=2), *rng.uniform(0.1, 1, 2), rng.normal(), *rng.normal(size=2),
                *rng.uniform(0.1, 1, 2), rng.normal())
        assert BACKENDS["python"].rect_intersection_area(*args) == pytest.approx(
            BACKENDS["cython"].rect_intersection_area(*args), abs=1e-12)


def _dijkstra_length(free, start, goal):
    """Shortest 8-connected path length without corner cutting."""
    H, W = free.shape
    G = lil_matrix((H * W, H * W))
    for r in range(H):
        for c in range(W):
            if not free[r, c]:
                continue
            for dr, dc in ((0, 1), (1, 0), (1, 1), (1, -1)):
                rr, cc = r + dr, c + dc
                if not (0 <= rr < H and 0 <= cc < W) or not free[rr, cc]:
                    continue
                if dr and dc and not (free[r + dr, c] and free[r, c + dc]):
                    continue
                w = math.sqrt(2) if dr and dc else 1.0
                G[r * W + c, rr * W + cc] = w
                G[rr * W + cc, r * W + c] = w
    d = dijkstra(G.tocsr(), indices=start[0] * W + start[1])
    return d[goal[0] * W + goal[1]]


def _path_length(path):
    return float(np.linalg.norm(np.diff(path, axis=0), axis=1).sum()) if len(path) > 1 else 0.0


@pytest.mark.parametrize("backend", sorted(BACKENDS))
def test_astar_optimal(backend):
    k = BACKENDS[backend]
    rng = np.random.default_rng(5)
    for _ in range(15):
        free = (rng.random((14, 17)) > 0.3).astype(np.uint8)
        free[0, 0] = free[-1, -1] = 1
        path = k.grid_astar(free, (0, 0), (13, 16))
        best = _dijkstra_length(free, (0, 0), (13, 16))
        if not np.isfinite(best):
            assert len(path) == 0
            continue
        assert tuple(path[0]) == (0, 0) and tuple(path[-1]) == (13, 16)
        assert all(free[r, c] for r, c in path)
        steps = np.abs(np.diff(path, axis=0))
        assert steps.max() <= 1
        assert _path_length(path) == pytest.approx(best, abs=1e-9)


@compiled
def test_astar_backends_identical():
    rng = np.random.default_rng(6)
    free = (rng.random((60, 60)) > 0.25).astype(np.uint8)
    free[0, 0] = free[-1, -1] = 1
    a = BACKENDS["python"].grid_astar(free, (0, 0), (59, 59))
    b = BACKENDS["cython"].grid_astar(free, (0, 0), (59, 59))
    np.testing.assert_array_equal(a, b)


def test_env_var_forces_fallback():
    import os
    import subprocess
    import sys
    env = dict(os.environ, REID3D_PURE_PYTHON="1")
    out = subprocess.run([sys.executable, "-c", "import reid3d._kernels as k; print(k.BACKEND)"],
                         env=env, capture_output=True, text=True, check=True)
    assert out.stdout.strip() == "python"
