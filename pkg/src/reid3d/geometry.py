"""Gravity-aligned 3D boxes: IoU, NMS and rigid transforms.

Conventions: ``y`` is the gravity (up) axis, the ground plane is ``(x, z)``
and yaw is a rotation about ``y``. A yaw of ``theta`` maps a local ground
vector ``(lx, lz)`` to ``(cos*lx + sin*lz, -sin*lx + cos*lz)``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import NamedTuple, Sequence

import numpy as np

from . import _kernels

TWO_PI = 2.0 * math.pi


def normalize_yaw(theta: float) -> float:
    """Wrap an angle into [-pi, pi); values already in range are returned as-is."""
    theta = float(theta)
    if -math.pi <= theta < math.pi:
        return theta
    out = math.fmod(theta + math.pi, TWO_PI)
    if out < 0.0:
        out += TWO_PI
    out -= math.pi
    # fmod rounding can land exactly on +pi
    return -math.pi if out >= math.pi else out


@dataclass(frozen=True)
class BoundingBox3D:
    centroid: tuple[float, float, float]
    extents: tuple[float, float, float]
    yaw: float = 0.0

    def __post_init__(self):
        object.__setattr__(self, "centroid", tuple(float(v) for v in self.centroid))
        object.__setattr__(self, "extents", tuple(float(v) for v in self.extents))
        object.__setattr__(self, "yaw", normalize_yaw(self.yaw))

    @property
    def volume(self) -> float:
        sx, sy, sz = self.extents
        return sx * sy * sz

    def violations(self) -> list[str]:
        out = []
        if len(self.centroid) != 3 or len(self.extents) != 3:
            out.append("centroid and extents must have 3 components")
            return out
        if not all(math.isfinite(v) for v in (*self.centroid, *self.extents, self.yaw)):
            out.append("non-finite box parameter")
        if not all(s > 0 for s in self.extents):
            out.append(f"extents must be > 0, got {self.extents}")
        return out

    def as_array(self) -> np.ndarray:
        return np.array([*self.centroid, *self.extents, self.yaw], dtype=np.float64)

    @classmethod
    def from_array(cls, row) -> "BoundingBox3D":
        row = [float(v) for v in row]
        return cls(tuple(row[0:3]), tuple(row[3:6]), row[6])

    def ground_corners(self) -> np.ndarray:
        """(4, 2) ground-plane corners (x, z), counter-clockwise."""
        cx, _, cz = self.centroid
        hx, hz = 0.5 * self.extents[0], 0.5 * self.extents[2]
        c, s = math.cos(self.yaw), math.sin(self.yaw)
        local = np.array([[hx, hz], [-hx, hz], [-hx, -hz], [hx, -hz]])
        x = cx + c * local[:, 0] + s * local[:, 1]
        z = cz - s * local[:, 0] + c * local[:, 1]
        return np.stack([x, z], axis=1)

    def ground_aabb(self) -> tuple[float, float, float, float]:
        """Axis-aligned footprint (xmin, zmin, xmax, zmax) of the yawed box."""
        cx, _, cz = self.centroid
        c, s = abs(math.cos(self.yaw)), abs(math.sin(self.yaw))
        hx, hz = 0.5 * self.extents[0], 0.5 * self.extents[2]
        ex = c * hx + s * hz
        ez = s * hx + c * hz
        return cx - ex, cz - ez, cx + ex, cz + ez

    def vertical_interval(self) -> tuple[float, float]:
        cy, hy = self.centroid[1], 0.5 * self.extents[1]
        return cy - hy, cy + hy


def boxes_to_array(boxes: Sequence[BoundingBox3D]) -> np.ndarray:
    if len(boxes) == 0:
        return np.zeros((0, 7))
    return np.stack([b.as_array() for b in boxes])


@dataclass(frozen=True)
class Rect2D:
    """Rotated rectangle in the ground plane."""

    center: tuple[float, float]
    half_extents: tuple[float, float]
    rotation: float = 0.0


def rotated_rect_intersection_area(a: Rect2D, b: Rect2D) -> float:
    """Area of overlap between two rotated rectangles (convex clipping)."""
    return _kernels.rect_intersection_area(
        float(a.center[0]), float(a.center[1]),
        float(a.half_extents[0]), float(a.half_extents[1]), float(a.rotation),
        float(b.center[0]), float(b.center[1]),
        float(b.half_extents[0]), float(b.half_extents[1]), float(b.rotation),
    )


def box_iou_3d(a: BoundingBox3D, b: BoundingBox3D) -> float:
    if a == b and all(s > 0 for s in a.extents):
        return 1.0
    ra, rb = a.as_array(), b.as_array()
    # clip in a canonical order so the result is bitwise symmetric
    if tuple(rb) < tuple(ra):
        ra, rb = rb, ra
    return float(_kernels.pairwise_iou3d(ra[None], rb[None])[0, 0])


def pairwise_iou_3d(boxes_a: Sequence[BoundingBox3D], boxes_b: Sequence[BoundingBox3D]) -> np.ndarray:
    return _kernels.pairwise_iou3d(boxes_to_array(boxes_a), boxes_to_array(boxes_b))


class Detection(NamedTuple):
    box: BoundingBox3D
    confidence: float
    label: str
    descriptor: np.ndarray | None = None


def nms(detections: Sequence[Detection], conf_threshold: float = 0.99,
        iou_threshold: float = 0.05) -> list[Detection]:
    """Class-agnostic greedy 3D non-maximum suppression.

    Detections with confidence below ``conf_threshold`` are dropped, the rest
    visited in descending confidence (ties by input order); a detection is
    suppressed when its IoU with an already-kept one exceeds ``iou_threshold``.
    """
    kept_idx = [i for i, d in enumerate(detections) if d.confidence >= conf_threshold]
    if not kept_idx:
        return []
    order = sorted(kept_idx, key=lambda i: (-detections[i].confidence, i))
    boxes = boxes_to_array([detections[i].box for i in order])
    iou = _kernels.pairwise_iou3d(boxes, boxes)
    alive = np.ones(len(order), dtype=bool)
    keep = []
    for k in range(len(order)):
        if not alive[k]:
            continue
        keep.append(order[k])
        alive[k + 1:] &= iou[k, k + 1:] <= iou_threshold
    return [detections[i] for i in keep]


def rotate_ground(x, z, theta):
    c, s = math.cos(theta), math.sin(theta)
    return c * x + s * z, -s * x + c * z


def apply_rigid_transform(boxes: Sequence[BoundingBox3D], rotation_y: float,
                          translation: tuple[float, float] = (0.0, 0.0)) -> list[BoundingBox3D]:
    """Rotate boxes about the world ``y`` axis, then translate in the ground plane."""
    if rotation_y == 0.0 and translation[0] == 0.0 and translation[1] == 0.0:
        return list(boxes)
    tx, tz = float(translation[0]), float(translation[1])
    out = []
    for b in boxes:
        cx, cy, cz = b.centroid
        x, z = rotate_ground(cx, cz, rotation_y)
        out.append(BoundingBox3D((x + tx, cy, z + tz), b.extents, normalize_yaw(b.yaw + rotation_y)))
    return out


@dataclass(frozen=True)
class RigidTransform2D:
    """Yaw rotation about the origin followed by a ground-plane translation."""

    rotation_y: float = 0.0
    translation: tuple[float, float] = field(default=(0.0, 0.0))

    def apply_points(self, xz: np.ndarray) -> np.ndarray:
        xz = np.asarray(xz, dtype=np.float64)
        x, z = rotate_ground(xz[..., 0], xz[..., 1], self.rotation_y)
        return np.stack([x + self.translation[0], z + self.translation[1]], axis=-1)

    def apply_boxes(self, boxes):
        return apply_rigid_transform(boxes, self.rotation_y, self.translation)
