"""Procedural rectilinear apartments: rooms, walls with doors, furniture."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from ..geometry import BoundingBox3D

ENV_SCHEMA = "reid3d-env/1"
WALL_HEIGHT = 2.5
WALL_THICKNESS = 0.1
DOOR_WIDTH = 1.2

# name -> (x extent, height, z extent); receptacle tops are support surfaces
RECEPTACLE_TYPES = {
    "table": (1.4, 0.75, 0.9),
    "sofa": (2.0, 0.45, 0.9),
    "counter": (2.0, 0.9, 0.6),
    "bed": (2.0, 0.55, 1.6),
}
OBSTACLE_TYPES = {
    "wardrobe": (1.0, 2.0, 0.6),
    "shelf": (1.2, 1.8, 0.4),
    "column": (0.5, 2.5, 0.5),
}


class GenerationError(RuntimeError):
    """The sampler could not produce a valid environment, layout or tour."""


@dataclass
class Receptacle:
    name: str
    box: BoundingBox3D

    @property
    def support_height(self) -> float:
        return self.box.vertical_interval()[1]

    def support_rect(self) -> tuple[float, float, float, float]:
        return self.box.ground_aabb()


@dataclass
class Environment:
    env_id: str
    rooms: list[tuple[float, float, float, float]]  # (xmin, zmin, xmax, zmax)
    walls: list[BoundingBox3D]
    doors: list[tuple[float, float]]
    obstacles: list[BoundingBox3D]
    receptacles: list[Receptacle]
    seed: int = 0
    wall_height: float = WALL_HEIGHT

    @property
    def bounds(self) -> tuple[float, float, float, float]:
        r = np.asarray(self.rooms)
        return float(r[:, 0].min()), float(r[:, 1].min()), float(r[:, 2].max()), float(r[:, 3].max())

    @property
    def floor_area(self) -> float:
        return float(sum((r[2] - r[0]) * (r[3] - r[1]) for r in self.rooms))

    def static_boxes(self) -> list[BoundingBox3D]:
        """Walls, obstacles and receptacles: everything that blocks motion and sight."""
        return list(self.walls) + list(self.obstacles) + [r.box for r in self.receptacles]

    def door_keepouts(self, radius: float = 0.8) -> list[BoundingBox3D]:
        return [BoundingBox3D((x, 1.0, z), (2 * radius, 2.0, 2 * radius)) for x, z in self.doors]

    def inside_floor(self, x, z) -> np.ndarray:
        x = np.asarray(x, dtype=np.float64)
        z = np.asarray(z, dtype=np.float64)
        out = np.zeros(np.broadcast(x, z).shape, dtype=bool)
        for x0, z0, x1, z1 in self.rooms:
            out |= (x >= x0) & (x <= x1) & (z >= z0) & (z <= z1)
        return out

    def to_dict(self) -> dict:
        def box(b):
            return {"centroid": list(b.centroid), "extents": list(b.extents), "yaw": b.yaw}
        return {
            "version": ENV_SCHEMA,
            "env_id": self.env_id,
            "seed": self.seed,
            "wall_height": self.wall_height,
            "rooms": [list(r) for r in self.rooms],
            "walls": [box(b) for b in self.walls],
            "doors": [list(d) for d in self.doors],
            "obstacles": [box(b) for b in self.obstacles],
            "receptacles": [{"name": r.name, **box(r.box)} for r in self.receptacles],
        }

    @classmethod
    def from_dict(cls, doc: dict) -> "Environment":
        def box(r):
            return BoundingBox3D(tuple(r["centroid"]), tuple(r["extents"]), r["yaw"])
        return cls(
            doc["env_id"],
            [tuple(r) for r in doc["rooms"]],
            [box(b) for b in doc["walls"]],
            [tuple(d) for d in doc["doors"]],
            [box(b) for b in doc["obstacles"]],
            [Receptacle(r["name"], box(r)) for r in doc["receptacles"]],
            int(doc.get("seed", 0)),
            float(doc.get("wall_height", WALL_HEIGHT)),
        )


def aabb3(box: BoundingBox3D) -> np.ndarray:
    """(xmin, ymin, zmin, xmax, ymax, zmax) of a yawed box."""
    x0, z0, x1, z1 = box.ground_aabb()
    y0, y1 = box.vertical_interval()
    return np.array([x0, y0, z0, x1, y1, z1])


def aabbs(boxes) -> np.ndarray:
    if not boxes:
        return np.zeros((0, 6))
    return np.stack([aabb3(b) for b in boxes])


def aabb_overlaps(a: np.ndarray, others: np.ndarray, gap: float = 0.0) -> np.ndarray:
    """Strict overlap of one AABB against many; ``gap`` inflates the test."""
    if len(others) == 0:
        return np.zeros(0, dtype=bool)
    return np.all((a[:3] - gap < others[:, 3:]) & (others[:, :3] < a[3:] + gap), axis=1)


def _wall(x0, z0, x1, z1, height=WALL_HEIGHT, t=WALL_THICKNESS):
    cx, cz = 0.5 * (x0 + x1), 0.5 * (z0 + z1)
    sx = max(abs(x1 - x0), t)
    sz = max(abs(z1 - z0), t)
    return BoundingBox3D((cx, 0.5 * height, cz), (sx, height, sz), 0.0)


def _split_rooms(rng, width, depth, n_rooms, min_side):
    rooms = [(0.0, 0.0, width, depth)]
    splits = []  # (axis, coordinate, lo, hi) of each interior wall
    for _ in range(n_rooms - 1):
        order = sorted(range(len(rooms)), key=lambda k: -(rooms[k][2] - rooms[k][0]) * (rooms[k][3] - rooms[k][1]))
        for k in order:
            x0, z0, x1, z1 = rooms[k]
            w, d = x1 - x0, z1 - z0
            axis = 0 if w >= d else 1
            side = w if axis == 0 else d
            if side < 2 * min_side:
                axis = 1 - axis
                side = d if axis == 1 else w
                if side < 2 * min_side:
                    continue
            lo = max(0.35, min_side / side)
            f = rng.uniform(lo, 1.0 - lo)
            if axis == 0:
                c = x0 + f * w
                rooms[k:k + 1] = [(x0, z0, c, z1), (c, z0, x1, z1)]
                splits.append((0, c, z0, z1))
            else:
                c = z0 + f * d
                rooms[k:k + 1] = [(x0, z0, x1, c), (x0, c, x1, z1)]
                splits.append((1, c, x0, x1))
            break
        else:
            break
    return rooms, splits


def make_environment(seed: int, area_range=(100.0, 600.0), n_rooms_range=(2, 6),
                     min_room_side: float = 3.0, env_id: str | None = None) -> Environment:
    """Sample a BSP apartment: an outer rectangle split into rooms joined by doors.

    Each room gets one or two receptacles and up to two tall obstacles placed
    against its walls, kept clear of doorways.
    """
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0xE4F]))
    # log-uniform: small homes are more common than large ones
    area = math.exp(rng.uniform(math.log(area_range[0]), math.log(area_range[1])))
    aspect = rng.uniform(1.0, 2.0)
    width = math.sqrt(area * aspect)
    depth = area / width
    n_rooms = int(rng.integers(n_rooms_range[0], n_rooms_range[1] + 1))
    rooms, splits = _split_rooms(rng, width, depth, n_rooms, min_room_side)

    t = WALL_THICKNESS
    walls = [
        _wall(-t / 2, -t, -t / 2, depth + t), _wall(width + t / 2, -t, width + t / 2, depth + t),
        _wall(-t, -t / 2, width + t, -t / 2), _wall(-t, depth + t / 2, width + t, depth + t / 2),
    ]
    doors = []
    for axis, c, lo, hi in splits:
        a = rng.uniform(lo + 0.4, hi - 0.4 - DOOR_WIDTH)
        b = a + DOOR_WIDTH
        if axis == 0:
            walls += [_wall(c, lo, c, a), _wall(c, b, c, hi)]
            doors.append((c, 0.5 * (a + b)))
        else:
            walls += [_wall(lo, c, a, c), _wall(b, c, hi, c)]
            doors.append((0.5 * (a + b), c))

    env = Environment(env_id or f"env-{seed}", rooms, walls, doors, [], [], seed)
    keepouts = aabbs(env.door_keepouts(1.0))
    placed = np.zeros((0, 6))

    def place(dims, room):
        nonlocal placed
        x0, z0, x1, z1 = room
        for _ in range(200):
            sx, sy, sz = dims
            if rng.random() < 0.5:
                sx, sz = sz, sx
            # push against one of the four walls
            side = int(rng.integers(4))
            if side < 2:
                cx = x0 + sx / 2 + 0.05 if side == 0 else x1 - sx / 2 - 0.05
                cz = rng.uniform(z0 + sz / 2 + 0.05, max(z0 + sz / 2 + 0.05, z1 - sz / 2 - 0.05))
            else:
                cz = z0 + sz / 2 + 0.05 if side == 2 else z1 - sz / 2 - 0.05
                cx = rng.uniform(x0 + sx / 2 + 0.05, max(x0 + sx / 2 + 0.05, x1 - sx / 2 - 0.05))
            box = BoundingBox3D((cx, sy / 2, cz), (sx, sy, sz), 0.0)
            bb = aabb3(box)
            if bb[0] < x0 or bb[3] > x1 or bb[2] < z0 or bb[5] > z1:
                continue
            if aabb_overlaps(bb, keepouts).any() or aabb_overlaps(bb, placed, gap=0.6).any():
                continue
            placed = np.vstack([placed, bb])
            return box
        return None

    for room in rooms:
        for _ in range(int(rng.integers(1, 3))):
            name = list(RECEPTACLE_TYPES)[int(rng.integers(len(RECEPTACLE_TYPES)))]
            box = place(RECEPTACLE_TYPES[name], room)
            if box is not None:
                env.receptacles.append(Receptacle(name, box))
        for _ in range(int(rng.integers(0, 3))):
            name = list(OBSTACLE_TYPES)[int(rng.integers(len(OBSTACLE_TYPES)))]
            box = place(OBSTACLE_TYPES[name], room)
            if box is not None:
                env.obstacles.append(box)
    if not env.receptacles:
        raise GenerationError(f"environment {env.env_id}: no receptacle could be placed")
    return env


# ---------------------------------------------------------------------------
# occupancy grids
# ---------------------------------------------------------------------------

@dataclass
class Grid:
    origin: tuple[float, float]  # world (x, z) of cell (0, 0) centre
    resolution: float
    shape: tuple[int, int]  # (rows along z, cols along x)

    def cell_centers(self):
        zs = self.origin[1] + self.resolution * np.arange(self.shape[0])
        xs = self.origin[0] + self.resolution * np.arange(self.shape[1])
        return np.meshgrid(xs, zs)

    def to_cell(self, x, z):
        c = np.rint((np.asarray(x) - self.origin[0]) / self.resolution).astype(np.int64)
        r = np.rint((np.asarray(z) - self.origin[1]) / self.resolution).astype(np.int64)
        return r, c

    def to_world(self, rows, cols):
        return (self.origin[0] + self.resolution * np.asarray(cols, dtype=np.float64),
                self.origin[1] + self.resolution * np.asarray(rows, dtype=np.float64))


def make_grid(env: Environment, resolution: float = 0.1, margin: float = 0.5) -> Grid:
    x0, z0, x1, z1 = env.bounds
    ox, oz = x0 - margin, z0 - margin
    cols = int(math.ceil((x1 + margin - ox) / resolution)) + 1
    rows = int(math.ceil((z1 + margin - oz) / resolution)) + 1
    return Grid((ox, oz), resolution, (rows, cols))
