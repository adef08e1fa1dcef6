"""Object-based maps: the detections summarising one tour of one layout."""
from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any

import numpy as np

from .geometry import BoundingBox3D, boxes_to_array

MAP_SCHEMA = "reid3d-map/1"


class MapParseError(ValueError):
    """Malformed map document."""


class MapSchemaError(ValueError):
    """Well-formed document that violates the map schema (e.g. wrong dimension)."""


@dataclass(eq=False)
class ObjectInstance:
    box: BoundingBox3D
    label: str
    confidence: float
    descriptor: np.ndarray
    instance_id: int | str | None = None

    def __post_init__(self):
        self.descriptor = np.asarray(self.descriptor, dtype=np.float64).reshape(-1)
        self.confidence = float(self.confidence)

    def __eq__(self, other):
        if not isinstance(other, ObjectInstance):
            return NotImplemented
        return (
            self.box == other.box
            and self.label == other.label
            and _same_float(self.confidence, other.confidence)
            and self.descriptor.shape == other.descriptor.shape
            and self.descriptor.tobytes() == other.descriptor.tobytes()
            and self.instance_id == other.instance_id
        )


def _same_float(a, b):
    return a == b or (math.isnan(a) and math.isnan(b))


@dataclass(eq=False)
class ObjectMap:
    objects: list[ObjectInstance] = field(default_factory=list)
    layout_tag: str = "A"
    descriptor_dim: int = 256
    episode_id: str = ""
    seed: int | None = None

    def __len__(self):
        return len(self.objects)

    def __eq__(self, other):
        if not isinstance(other, ObjectMap):
            return NotImplemented
        return (
            self.layout_tag == other.layout_tag
            and self.descriptor_dim == other.descriptor_dim
            and self.episode_id == other.episode_id
            and self.seed == other.seed
            and self.objects == other.objects
        )

    def descriptors(self) -> np.ndarray:
        if not self.objects:
            return np.zeros((0, self.descriptor_dim))
        return np.stack([o.descriptor for o in self.objects])

    def boxes(self) -> list[BoundingBox3D]:
        return [o.box for o in self.objects]

    def box_array(self) -> np.ndarray:
        return boxes_to_array(self.boxes())

    def labels(self) -> list[str]:
        return [o.label for o in self.objects]

    def instance_ids(self) -> list:
        return [o.instance_id for o in self.objects]


def validate_map(m: ObjectMap) -> list[str]:
    """Every invariant violation in ``m``; empty iff the map is valid."""
    out = []
    if m.layout_tag not in ("A", "B"):
        out.append(f"layout_tag must be 'A' or 'B', got {m.layout_tag!r}")
    if not isinstance(m.descriptor_dim, int) or m.descriptor_dim <= 0:
        out.append(f"descriptor_dim must be a positive int, got {m.descriptor_dim!r}")
    for i, o in enumerate(m.objects):
        for v in o.box.violations():
            out.append(f"object {i}: {v}")
        if not 0.0 <= o.confidence <= 1.0:
            out.append(f"object {i}: confidence {o.confidence} outside [0, 1]")
        if o.descriptor.shape != (m.descriptor_dim,):
            out.append(f"object {i}: descriptor length {o.descriptor.size} != {m.descriptor_dim}")
        elif not np.all(np.isfinite(o.descriptor)):
            out.append(f"object {i}: non-finite descriptor")
    return out


def map_to_dict(m: ObjectMap) -> dict[str, Any]:
    objs = []
    for o in m.objects:
        rec = {
            "centroid": list(o.box.centroid),
            "extents": list(o.box.extents),
            "yaw": o.box.yaw,
            "label": o.label,
            "confidence": o.confidence,
            "descriptor": o.descriptor.tolist(),
        }
        if o.instance_id is not None:
            rec["instance_id"] = o.instance_id
        objs.append(rec)
    return {
        "version": MAP_SCHEMA,
        "layout_tag": m.layout_tag,
        "descriptor_dim": m.descriptor_dim,
        "episode_id": m.episode_id,
        "seed": m.seed,
        "objects": objs,
    }


def _field(rec, key, where):
    try:
        return rec[key]
    except (KeyError, TypeError):
        raise MapParseError(f"{where}: missing field {key!r}") from None


def map_from_dict(doc: dict[str, Any], source: str = "<map>") -> ObjectMap:
    if not isinstance(doc, dict):
        raise MapParseError(f"{source}: top level must be an object")
    version = doc.get("version")
    if version != MAP_SCHEMA:
        raise MapSchemaError(f"{source}: unsupported version {version!r} (expected {MAP_SCHEMA})")
    d = _field(doc, "descriptor_dim", source)
    if not isinstance(d, int):
        raise MapSchemaError(f"{source}: descriptor_dim must be an integer")
    raw = _field(doc, "objects", source)
    if not isinstance(raw, list):
        raise MapParseError(f"{source}: 'objects' must be an array")
    objects = []
    for i, rec in enumerate(raw):
        where = f"{source}: objects[{i}]"
        try:
            centroid = [float(v) for v in _field(rec, "centroid", where)]
            extents = [float(v) for v in _field(rec, "extents", where)]
            if len(centroid) != 3 or len(extents) != 3:
                raise MapParseError(f"{where}: centroid/extents need 3 values")
            box = BoundingBox3D(tuple(centroid), tuple(extents), float(_field(rec, "yaw", where)))
            desc = np.asarray(_field(rec, "descriptor", where), dtype=np.float64)
            conf = float(_field(rec, "confidence", where))
            label = _field(rec, "label", where)
        except (TypeError, ValueError) as exc:
            if isinstance(exc, MapParseError):
                raise
            raise MapParseError(f"{where}: {exc}") from None
        if desc.ndim != 1 or desc.size != d:
            raise MapSchemaError(f"{where}: descriptor length {desc.size} != descriptor_dim {d}")
        objects.append(ObjectInstance(box, str(label), conf, desc, rec.get("instance_id")))
    return ObjectMap(objects, doc.get("layout_tag", "A"), d, doc.get("episode_id", ""), doc.get("seed"))


def save_map(m: ObjectMap, path) -> None:
    # json writes repr() floats, which round-trip bit-exactly
    Path(path).write_text(json.dumps(map_to_dict(m), allow_nan=False))


def load_map(path) -> ObjectMap:
    try:
        doc = json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise MapParseError(f"{path}: {exc}") from None
    return map_from_dict(doc, str(path))
