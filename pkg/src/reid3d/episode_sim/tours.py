"""Egocentric tours through an environment and the per-object coverage model."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .. import _kernels
from .environment import Environment, GenerationError, Grid, aabbs, make_grid

STEP_LENGTH = 0.25  # metres per forward action
TURN_ANGLE = math.radians(10.0)  # radians per turn action
CAMERA_HEIGHT = 1.25
N_AZIMUTH_BINS = 8


@dataclass
class Tour:
    waypoints: np.ndarray  # (k, 2) selected (x, z) locations in visiting order
    path: np.ndarray  # (p, 2) dense planner path, resampled every STEP_LENGTH
    n_steps: int

    def to_dict(self, transform=None) -> dict:
        wp, path = self.waypoints, self.path
        if transform is not None:
            wp, path = transform.apply_points(wp), transform.apply_points(path)
        return {"waypoints": wp.tolist(), "path": path.tolist(), "n_steps": int(self.n_steps)}


def _resample(poly: np.ndarray, step: float) -> np.ndarray:
    if len(poly) < 2:
        return poly.copy()
    seg = np.linalg.norm(np.diff(poly, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    if s[-1] == 0:
        return poly[:1].copy()
    n = int(math.floor(s[-1] / step))
    at = np.concatenate([np.arange(n + 1) * step, [s[-1]]]) if s[-1] - n * step > 1e-9 else np.arange(n + 1) * step
    return np.stack([np.interp(at, s, poly[:, 0]), np.interp(at, s, poly[:, 1])], axis=1)


def count_steps(path: np.ndarray) -> int:
    """Forward actions plus turn actions needed to follow a resampled path."""
    if len(path) < 2:
        return 0
    d = np.diff(path, axis=0)
    length = float(np.linalg.norm(d, axis=1).sum())
    heading = np.arctan2(d[:, 0], d[:, 1])
    dh = np.abs((np.diff(heading) + math.pi) % (2 * math.pi) - math.pi)
    return int(math.ceil(length / STEP_LENGTH - 1e-9)) + int(np.round(dh / TURN_ANGLE).sum())


class _Footprints:
    """Ground rectangles of a set of boxes, for exact clearance queries."""

    def __init__(self, boxes):
        boxes = list(boxes)
        self.c = np.array([[b.centroid[0], b.centroid[2]] for b in boxes]).reshape(-1, 2)
        self.h = np.array([[b.extents[0] / 2, b.extents[2] / 2] for b in boxes]).reshape(-1, 2)
        yaw = np.array([b.yaw for b in boxes], dtype=np.float64)
        self.cos, self.sin = np.cos(yaw), np.sin(yaw)
        self.reach = np.hypot(self.h[:, 0], self.h[:, 1])

    def __len__(self):
        return len(self.c)

    def _local(self, p):
        d = p[..., None, :] - self.c  # (..., M, 2)
        lx = self.cos * d[..., 0] - self.sin * d[..., 1]
        lz = self.sin * d[..., 0] + self.cos * d[..., 1]
        return lx, lz

    def point_distance(self, pts: np.ndarray) -> np.ndarray:
        """(N,) distance from each point to the nearest footprint (0 inside)."""
        pts = np.asarray(pts, dtype=np.float64).reshape(-1, 2)
        out = np.full(len(pts), np.inf)
        for k in range(len(self)):
            d = pts - self.c[k]
            lx = np.abs(self.cos[k] * d[:, 0] - self.sin[k] * d[:, 1]) - self.h[k, 0]
            lz = np.abs(self.sin[k] * d[:, 0] + self.cos[k] * d[:, 1]) - self.h[k, 1]
            np.minimum(out, np.hypot(np.maximum(lx, 0.0), np.maximum(lz, 0.0)), out=out)
        return out

    def segment_distance(self, a, b) -> float:
        """Exact distance from segment a-b to the nearest footprint."""
        if len(self) == 0:
            return math.inf
        a = np.asarray(a, dtype=np.float64)
        b = np.asarray(b, dtype=np.float64)
        ax, az = self._local(a)
        bx, bz = self._local(b)
        hx, hz = self.h[:, 0], self.h[:, 1]

        def pt(x, z):
            return np.hypot(np.maximum(np.abs(x) - hx, 0.0), np.maximum(np.abs(z) - hz, 0.0))

        best = np.minimum(pt(ax, az), pt(bx, bz))
        # corners against the segment
        ux, uz = bx - ax, bz - az
        L2 = ux * ux + uz * uz
        for sx, sz in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
            qx, qz = sx * hx - ax, sz * hz - az
            t = np.clip(np.divide(qx * ux + qz * uz, L2, out=np.zeros_like(L2), where=L2 > 0), 0.0, 1.0)
            best = np.minimum(best, np.hypot(qx - t * ux, qz - t * uz))
        # slab clipping detects a crossing
        t0, t1 = np.zeros_like(ux), np.ones_like(ux)
        for p0, u, h in ((ax, ux, hx), (az, uz, hz)):
            par = u == 0
            with np.errstate(divide="ignore", invalid="ignore"):
                ta, tb = (-h - p0) / u, (h - p0) / u
            lo = np.where(par, np.where(np.abs(p0) <= h, -np.inf, np.inf), np.minimum(ta, tb))
            hi = np.where(par, np.where(np.abs(p0) <= h, np.inf, -np.inf), np.maximum(ta, tb))
            t0, t1 = np.maximum(t0, lo), np.minimum(t1, hi)
        best = np.where(t0 <= t1, 0.0, best)
        return float(best.min())


def _line_free(free: np.ndarray, a, b) -> bool:
    n = int(max(abs(b[0] - a[0]), abs(b[1] - a[1])) * 2) + 1
    t = np.linspace(0.0, 1.0, n + 1)
    r = np.rint(a[0] + t * (b[0] - a[0])).astype(np.int64)
    c = np.rint(a[1] + t * (b[1] - a[1])).astype(np.int64)
    return bool(free[r, c].all())


def shortcut(free: np.ndarray, cells: np.ndarray, line_free=None) -> np.ndarray:
    """Greedy line-of-sight smoothing of a grid path; returns its corner cells.

    ``line_free(a, b)`` decides visibility between two cells; the default
    samples the occupancy grid along the segment.
    """
    if len(cells) <= 2:
        return cells
    test = line_free or (lambda a, b: _line_free(free, a, b))
    out = [0]
    i = 0
    while i < len(cells) - 1:
        j = i + 1
        while j + 1 < len(cells) and test(cells[i], cells[j + 1]):
            j += 1
        out.append(j)
        i = j
    return cells[out]


def exact_clearance(env: Environment, grid: Grid, boxes) -> np.ndarray:
    """Exact distance (m) from each cell centre to the nearest box footprint, 0 off the floor."""
    X, Z = grid.cell_centers()
    d = _Footprints(boxes).point_distance(np.stack([X.ravel(), Z.ravel()], axis=1)).reshape(X.shape)
    return np.where(env.inside_floor(X, Z), d, 0.0)


def sample_tour(env: Environment, seed=0, object_boxes=(), n_candidates: int = 1000,
                candidate_clearance: float = 1.0, min_separation: float = 2.0,
                planner_clearance: float = 0.25, resolution: float = 0.1) -> Tour:
    """Greedy nearest-candidate tour joined by grid A* shortest paths.

    Each planner segment is smoothed by line-of-sight shortcutting before
    the path is resampled into forward steps.

    Candidates are cells at least ``candidate_clearance`` from every wall,
    obstacle and receptacle that the planner can also stand on given the
    placed objects. After each visit the chosen location and all
    candidates within ``min_separation`` of it are discarded; the tour ends
    when none remain.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    grid = make_grid(env, resolution)
    static = list(env.static_boxes())
    blockers = _Footprints(static + list(object_boxes))
    static_clear = exact_clearance(env, grid, static)
    # one grid step moves at most res*sqrt(2)/2 away from either end cell
    free = exact_clearance(env, grid, static + list(object_boxes)) >= planner_clearance + resolution * math.sqrt(0.5)
    comp, _ = ndimage.label(free, structure=np.ones((3, 3), dtype=int))
    cand = np.argwhere((static_clear >= candidate_clearance) & free)
    if len(cand) == 0:
        raise GenerationError(f"environment {env.env_id}: no location with {candidate_clearance} m clearance")
    if len(cand) > n_candidates:
        cand = cand[np.sort(rng.choice(len(cand), n_candidates, replace=False))]
    start = cand[int(rng.integers(len(cand)))]
    # only candidates reachable from the start are usable
    cand = cand[comp[cand[:, 0], cand[:, 1]] == comp[start[0], start[1]]]
    xs, zs = grid.to_world(cand[:, 0], cand[:, 1])
    pos = np.stack([xs, zs], axis=1)
    alive = np.ones(len(cand), dtype=bool)
    k = int(np.nonzero((cand == start).all(axis=1))[0][0])
    order = [k]
    cells = [cand[k:k + 1]]
    free_u8 = free.astype(np.uint8)

    def visible(a, b):
        pa = grid.to_world(a[0], a[1])
        pb = grid.to_world(b[0], b[1])
        return blockers.segment_distance(pa, pb) >= planner_clearance

    while True:
        alive &= np.linalg.norm(pos - pos[k], axis=1) >= min_separation
        if not alive.any():
            break
        idx = np.nonzero(alive)[0]
        nxt = int(idx[np.argmin(np.linalg.norm(pos[idx] - pos[k], axis=1))])
        seg = _kernels.grid_astar(free_u8, tuple(cand[k]), tuple(cand[nxt]))
        alive[nxt] = False
        if len(seg) == 0:
            continue
        cells.append(shortcut(free, seg, visible)[1:])
        order.append(nxt)
        k = nxt
    cells = np.concatenate(cells)
    px, pz = grid.to_world(cells[:, 0], cells[:, 1])
    dense = np.stack([px, pz], axis=1)
    path = _resample(dense, STEP_LENGTH)
    return Tour(pos[order], path, count_steps(path))


# ---------------------------------------------------------------------------
# coverage
# ---------------------------------------------------------------------------

def _segment_hits(origins: np.ndarray, target: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """(V,) True where the segment origin->target crosses any AABB."""
    if len(boxes) == 0 or len(origins) == 0:
        return np.zeros(len(origins), dtype=bool)
    d = target[None, :] - origins  # (V, 3)
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = 1.0 / d
    tmin = np.full((len(origins), len(boxes)), -np.inf)
    tmax = np.full((len(origins), len(boxes)), np.inf)
    for ax in range(3):
        lo = boxes[None, :, ax] - origins[:, None, ax]
        hi = boxes[None, :, ax + 3] - origins[:, None, ax]
        par = d[:, ax] == 0
        t1 = lo * inv[:, None, ax]
        t2 = hi * inv[:, None, ax]
        a = np.where(par[:, None], np.where((lo <= 0) & (hi >= 0), -np.inf, np.inf), np.minimum(t1, t2))
        b = np.where(par[:, None], np.where((lo <= 0) & (hi >= 0), np.inf, -np.inf), np.maximum(t1, t2))
        tmin = np.maximum(tmin, a)
        tmax = np.minimum(tmax, b)
    hit = (tmax >= np.maximum(tmin, 0.0)) & (tmin <= 1.0)
    return hit.any(axis=1)


def coverage(path: np.ndarray, env: Environment, boxes, supports=None, fov_deg: float = 90.0,
             max_range: float = 4.0, camera_height: float = CAMERA_HEIGHT) -> np.ndarray:
    """Fraction of the 8 azimuth bins around each object seen from the path.

    A path point sees an object when its centroid is within ``max_range``,
    inside the horizontal field of view of a camera facing along the path,
    and the sight line misses every wall, obstacle, receptacle (except the
    one the object rests on) and other object.
    """
    boxes = list(boxes)
    n = len(boxes)
    out = np.zeros(n)
    if n == 0 or len(path) == 0:
        return out
    supports = [-1] * n if supports is None else list(supports)
    path = np.asarray(path, dtype=np.float64)
    d = np.diff(path, axis=0)
    heading = np.arctan2(d[:, 0], d[:, 1]) if len(d) else np.zeros(0)
    heading = np.concatenate([heading, heading[-1:]]) if len(heading) else np.zeros(1)
    cams = np.column_stack([path[:, 0], np.full(len(path), camera_height), path[:, 1]])
    static = aabbs(list(env.walls) + list(env.obstacles))
    recept = aabbs([r.box for r in env.receptacles])
    objs = aabbs(boxes)
    half_fov = math.radians(fov_deg) / 2
    for i, b in enumerate(boxes):
        c = np.asarray(b.centroid)
        v = c[[0, 2]] - path
        dist = np.linalg.norm(v, axis=1)
        ang = np.arctan2(v[:, 0], v[:, 1]) - heading
        ang = np.abs((ang + math.pi) % (2 * math.pi) - math.pi)
        ok = (dist <= max_range) & (ang <= half_fov)
        if not ok.any():
            continue
        idx = np.nonzero(ok)[0]
        rmask = np.ones(len(recept), dtype=bool)
        if supports[i] >= 0:
            rmask[supports[i]] = False
        omask = np.ones(n, dtype=bool)
        omask[i] = False
        blockers = np.vstack([static, recept[rmask], objs[omask]])
        vis = idx[~_segment_hits(cams[idx], c, blockers)]
        if len(vis) == 0:
            continue
        # azimuth of the viewer seen from the object, in the object's frame
        az = np.arctan2(-v[vis, 0], -v[vis, 1]) + b.yaw
        bins = np.floor(((az + math.pi) % (2 * math.pi)) / (2 * math.pi / N_AZIMUTH_BINS)).astype(int)
        out[i] = len(np.unique(np.clip(bins, 0, N_AZIMUTH_BINS - 1))) / N_AZIMUTH_BINS
    return out
