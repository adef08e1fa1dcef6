"""Timing of the hot kernels on every importable backend."""
from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np

from . import _kernels


@dataclass
class BenchRow:
    kernel: str
    backend: str
    size: str
    seconds: float  # best of ``repeats``
    speedup: float | None = None  # python time / this time


def _cases(rng):
    cost = rng.random((60, 80))
    Z = rng.normal(size=(41, 41)) * 3
    log_mu = np.zeros(41)
    log_mu[-1] = np.log(40)
    log_nu = log_mu.copy()
    boxes = np.column_stack([rng.uniform(-3, 3, size=(120, 3)), rng.uniform(0.3, 2, size=(120, 3)),
                             rng.uniform(-np.pi, np.pi, size=120)])
    free = (rng.random((120, 120)) > 0.2).astype(np.uint8)
    free[0, 0] = free[-1, -1] = 1
    u, v = _kernels._pykernels.sinkhorn_log_forward(Z, log_mu, log_nu, 100)
    G = rng.normal(size=Z.shape)
    return {
        "linear_assignment": ("60x80", lambda k: k.linear_assignment(cost)),
        "sinkhorn_log_forward": ("41x41, 100 it", lambda k: k.sinkhorn_log_forward(Z, log_mu, log_nu, 100)),
        "sinkhorn_log_backward": ("41x41, 100 it", lambda k: k.sinkhorn_log_backward(Z, log_mu, log_nu, u, v, G)),
        "pairwise_iou3d": ("120x120 boxes", lambda k: k.pairwise_iou3d(boxes, boxes)),
        "grid_astar": ("120x120 grid", lambda k: k.grid_astar(free, (0, 0), (119, 119))),
    }


def run_benchmarks(repeats: int = 5, seed: int = 0) -> list[BenchRow]:
    """Best-of-``repeats`` wall time per kernel and backend."""
    rng = np.random.default_rng(seed)
    cases = _cases(rng)
    backends = _kernels.available_backends()
    rows = []
    for name, (size, fn) in cases.items():
        times = {}
        for bname, mod in backends.items():
            best = float("inf")
            for _ in range(max(1, repeats)):
                t0 = time.perf_counter()
                fn(mod)
                best = min(best, time.perf_counter() - t0)
            times[bname] = best
        for bname, t in times.items():
            rows.append(BenchRow(name, bname, size, t, times["python"] / t if t > 0 else None))
    return rows


def format_rows(rows: list[BenchRow]) -> str:
    lines = [f"{'kernel':<24}{'backend':<9}{'size':<16}{'ms':>10}{'speedup':>9}"]
    for r in rows:
        sp = "" if r.speedup is None else f"{r.speedup:8.1f}x"
        lines.append(f"{r.kernel:<24}{r.backend:<9}{r.size:<16}{1e3 * r.seconds:>10.3f}{sp:>9}")
    return "\n".join(lines)
