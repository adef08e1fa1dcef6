"""Object layouts: initial placement, A-to-B modification and the B transform."""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np

from ..geometry import BoundingBox3D, RigidTransform2D, apply_rigid_transform, pairwise_iou_3d
from .catalog import ObjectModel
from .environment import Environment, GenerationError, aabb3, aabb_overlaps, aabbs

MAX_REJECTIONS = 10_000
SUPERCATEGORIES = ("moved", "unchanged", "removed", "added")


@dataclass
class PlacedObject:
    model: ObjectModel
    box: BoundingBox3D
    instance_id: int
    support: int = -1  # receptacle index, -1 for the floor


@dataclass
class Layout:
    objects: list[PlacedObject] = field(default_factory=list)
    env_id: str = ""

    def __len__(self):
        return len(self.objects)

    def boxes(self):
        return [o.box for o in self.objects]

    def by_id(self) -> dict[int, int]:
        return {o.instance_id: k for k, o in enumerate(self.objects)}


def scaled_extents(model: ObjectModel, size: float) -> tuple[float, float, float]:
    base = np.asarray(model.base_extents, dtype=np.float64)
    return tuple(float(v) for v in base * (size / base.max()))


class _Placer:
    """Rejection sampler for collision-free upright poses in one environment."""

    def __init__(self, env: Environment, rng, receptacle_prob: float = 0.5):
        self.env = env
        self.rng = rng
        self.receptacle_prob = receptacle_prob
        self.static = aabbs(env.walls + env.obstacles + env.door_keepouts(0.8))
        self.receptacles = aabbs([r.box for r in env.receptacles])
        self.room_areas = np.array([(r[2] - r[0]) * (r[3] - r[1]) for r in env.rooms])
        x0, z0, x1, z1 = env.bounds
        self.bounds = (x0, z0, x1, z1)

    def sample(self, extents, placed: np.ndarray) -> tuple[BoundingBox3D, int]:
        rng = self.rng
        for _ in range(MAX_REJECTIONS):
            yaw = rng.uniform(-math.pi, math.pi)
            if len(self.env.receptacles) and rng.random() < self.receptacle_prob:
                k = int(rng.integers(len(self.env.receptacles)))
                rx0, rz0, rx1, rz1 = self.env.receptacles[k].support_rect()
                x, z = rng.uniform(rx0, rx1), rng.uniform(rz0, rz1)
                y = self.env.receptacles[k].support_height + extents[1] / 2
                support = k
            else:
                room = self.env.rooms[int(rng.choice(len(self.env.rooms), p=self.room_areas / self.room_areas.sum()))]
                x, z = rng.uniform(room[0], room[2]), rng.uniform(room[1], room[3])
                y = extents[1] / 2
                support = -1
            box = BoundingBox3D((x, y, z), extents, yaw)
            bb = aabb3(box)
            x0, z0, x1, z1 = self.bounds
            if bb[0] < x0 or bb[2] < z0 or bb[3] > x1 or bb[5] > z1:
                continue
            if aabb_overlaps(bb, self.static).any() or aabb_overlaps(bb, placed).any():
                continue
            hits = aabb_overlaps(bb, self.receptacles)
            if support >= 0:
                hits[support] = False
            if hits.any():
                continue
            return box, support
        raise GenerationError(
            f"environment {self.env.env_id}: {MAX_REJECTIONS} consecutive placement rejections")


def _draw_models(catalog_models: list[ObjectModel], n: int, rng, exclude=()) -> list[ObjectModel]:
    """Class first, then instance; no model is used twice within an episode."""
    used = set(exclude)
    pools: dict[str, list[ObjectModel]] = {}
    for m in catalog_models:
        if m.model_id not in used:
            pools.setdefault(m.label, []).append(m)
    out = []
    for _ in range(n):
        labels = sorted(k for k, v in pools.items() if v)
        if not labels:
            raise GenerationError("catalog split exhausted while drawing instances")
        label = labels[int(rng.integers(len(labels)))]
        pool = pools[label]
        out.append(pool.pop(int(rng.integers(len(pool)))))
    return out


def sample_initial_layout(env: Environment, models: list[ObjectModel], n: int = 30, seed=0,
                          size_range=(1.0, 1.5), receptacle_prob: float = 0.5) -> Layout:
    """Place ``n`` catalog instances on the floor or on receptacle tops.

    Each instance is scaled so its largest side is ``t ~ U(size_range)`` and
    given a uniform yaw; colliding samples are rejected and redrawn.
    """
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    if not env.receptacles or env.floor_area <= 0:
        raise GenerationError(f"environment {env.env_id}: needs a receptacle and floor area")
    placer = _Placer(env, rng, receptacle_prob)
    layout = Layout([], env.env_id)
    placed = np.zeros((0, 6))
    for k, model in enumerate(_draw_models(models, n, rng)):
        ext = scaled_extents(model, rng.uniform(*size_range))
        box, support = placer.sample(ext, placed)
        placed = np.vstack([placed, aabb3(box)])
        layout.objects.append(PlacedObject(model, box, k, support))
    return layout


@dataclass
class LayoutChange:
    """Ground truth relating layout A to layout B (indices into each layout)."""

    matches: list[tuple[int, int]]
    removed: list[int]
    added: list[int]
    supercategory: dict[int, str]  # instance_id -> supercategory


def modify_layout(env: Environment, layout_a: Layout, models: list[ObjectModel], seed=0,
                  size_range=(1.0, 1.5), receptacle_prob: float = 0.5) -> tuple[Layout, LayoutChange]:
    """Keep a third of the objects, move a third, remove a third and add as many new ones."""
    n = len(layout_a)
    if n % 3:
        raise ValueError(f"layout size must be divisible by 3, got {n}")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    third = n // 3
    perm = rng.permutation(n)
    unchanged, moved, removed = perm[:third], perm[third:2 * third], perm[2 * third:]
    placer = _Placer(env, rng, receptacle_prob)

    b_objects = [replace(layout_a.objects[i]) for i in sorted(unchanged)]
    placed = aabbs([o.box for o in b_objects])
    for i in sorted(moved):
        src = layout_a.objects[i]
        box, support = placer.sample(src.box.extents, placed)
        placed = np.vstack([placed, aabb3(box)])
        b_objects.append(PlacedObject(src.model, box, src.instance_id, support))
    next_id = max((o.instance_id for o in layout_a.objects), default=-1) + 1
    new_models = _draw_models(models, third, rng, exclude=[o.model.model_id for o in layout_a.objects])
    for k, model in enumerate(new_models):
        ext = scaled_extents(model, rng.uniform(*size_range))
        box, support = placer.sample(ext, placed)
        placed = np.vstack([placed, aabb3(box)])
        b_objects.append(PlacedObject(model, box, next_id + k, support))

    layout_b = Layout(b_objects, env.env_id)
    b_index = layout_b.by_id()
    sup = {}
    matches = []
    for i, o in enumerate(layout_a.objects):
        if o.instance_id in b_index:
            matches.append((i, b_index[o.instance_id]))
    for i in unchanged:
        sup[layout_a.objects[i].instance_id] = "unchanged"
    for i in moved:
        sup[layout_a.objects[i].instance_id] = "moved"
    for i in removed:
        sup[layout_a.objects[i].instance_id] = "removed"
    added = list(range(2 * third, len(b_objects)))
    for j in added:
        sup[b_objects[j].instance_id] = "added"
    return layout_b, LayoutChange(matches, sorted(int(i) for i in removed), added, sup)


def sample_transform(seed=0, translation_range: float = 10.0) -> RigidTransform2D:
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    yaw = rng.uniform(-math.pi, math.pi)
    tx, tz = rng.uniform(-translation_range, translation_range, size=2)
    return RigidTransform2D(float(yaw), (float(tx), float(tz)))


def transform_layout_b(layout_b: Layout, transform: RigidTransform2D) -> Layout:
    boxes = apply_rigid_transform(layout_b.boxes(), transform.rotation_y, transform.translation)
    return Layout([replace(o, box=b) for o, b in zip(layout_b.objects, boxes)], layout_b.env_id)


def collisions(layout_or_boxes, exact: bool = False) -> list[tuple[int, int]]:
    """Pairs of overlapping objects (should be empty).

    The default compares yawed AABBs, the placement test, which is only
    meaningful in the environment frame. ``exact=True`` compares the
    oriented boxes and is invariant to rigid transforms.
    """
    boxes = layout_or_boxes.boxes() if hasattr(layout_or_boxes, "boxes") else list(layout_or_boxes)
    if exact:
        iou = pairwise_iou_3d(boxes, boxes)
        return [(int(i), int(j)) for i, j in zip(*np.nonzero(np.triu(iou, 1) > 0))]
    bb = aabbs(boxes)
    out = []
    for i in range(len(bb)):
        hit = aabb_overlaps(bb[i], bb[i + 1:])
        out.extend((i, i + 1 + int(j)) for j in np.nonzero(hit)[0])
    return out
