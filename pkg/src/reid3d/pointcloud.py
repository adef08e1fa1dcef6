"""Point clouds from posed depth frames, voxel subsampling, sliding windows and I/O.

Camera frames use the pinhole convention ``x`` right, ``y`` down, ``z``
forward; a positive tilt pitches the optical axis toward ``+y`` (down).
World ``y`` is up.
"""
from __future__ import annotations

import math
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

MAGIC = b"R3PC"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sHHQ")  # magic, version, flags, count -> 16 bytes
_RECORD = np.dtype([("xyz", "<f8", (3,)), ("rgb", "u1", (3,))])
_FLAG_RGB = 1


class PointCloudFormatError(ValueError):
    pass


@dataclass
class PointCloud:
    points: np.ndarray
    colors: np.ndarray | None = None

    def __post_init__(self):
        self.points = np.asarray(self.points, dtype=np.float64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
            if len(self.colors) != len(self.points):
                raise ValueError("colors and points differ in length")
        if not np.all(np.isfinite(self.points)):
            raise ValueError("point cloud contains non-finite coordinates")

    def __len__(self):
        return len(self.points)

    @classmethod
    def empty(cls, with_colors=False):
        return cls(np.zeros((0, 3)), np.zeros((0, 3)) if with_colors else None)

    def subset(self, mask) -> "PointCloud":
        return PointCloud(self.points[mask], None if self.colors is None else self.colors[mask])


@dataclass
class CameraFrame:
    depth: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray  # camera -> world, 3x3
    translation: np.ndarray  # camera centre in world, (3,)
    camera_height: float = 0.0
    colors: np.ndarray | None = None  # (H, W, 3) in [0, 1]


def tilt_matrix(tilt_deg: float) -> np.ndarray:
    """Pitch about the camera x axis turning the optical axis toward +y (down)."""
    t = math.radians(tilt_deg)
    c, s = math.cos(t), math.sin(t)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, s], [0.0, -s, c]])


def unproject_frame(frame: CameraFrame, tilt_deg: float = 22.5,
                    height_cutoff: float = 0.5) -> PointCloud:
    """Lift every valid depth pixel to a world-frame point.

    Points higher than ``camera_height + height_cutoff`` (world y) are dropped.
    """
    if frame.fx <= 0 or frame.fy <= 0:
        raise ValueError("intrinsics must be positive")
    R = np.asarray(frame.rotation, dtype=np.float64).reshape(3, 3)
    t = np.asarray(frame.translation, dtype=np.float64).reshape(3)
    if not (np.all(np.isfinite(R)) and np.all(np.isfinite(t))):
        raise ValueError("camera pose must be finite")
    depth = np.asarray(frame.depth, dtype=np.float64)
    with_colors = frame.colors is not None
    if depth.size == 0:
        return PointCloud.empty(with_colors)
    v, u = np.nonzero(np.isfinite(depth) & (depth > 0))
    d = depth[v, u]
    cam = np.stack([(u - frame.cx) * d / frame.fx, (v - frame.cy) * d / frame.fy, d], axis=1)
    Rw = R @ tilt_matrix(tilt_deg)
    world = cam @ Rw.T + t
    keep = world[:, 1] <= frame.camera_height + height_cutoff
    colors = None
    if with_colors:
        colors = np.asarray(frame.colors, dtype=np.float64)[v, u][keep]
    return PointCloud(world[keep], colors)


def accumulate_tour(frames: Sequence[CameraFrame], tilt_deg: float = 22.5,
                    height_cutoff: float = 0.5) -> PointCloud:
    clouds = [unproject_frame(f, tilt_deg, height_cutoff) for f in frames]
    if not clouds:
        return PointCloud.empty()
    pts = np.concatenate([c.points for c in clouds])
    if all(c.colors is not None for c in clouds):
        return PointCloud(pts, np.concatenate([c.colors for c in clouds]))
    return PointCloud(pts)


def voxel_subsample(cloud: PointCloud, resolution: float = 0.03) -> PointCloud:
    """Keep one point per occupied voxel: the centroid of its points.

    The grid is anchored at the world origin with half-open cells, and output
    is ordered by voxel index.
    """
    if not resolution > 0:
        raise ValueError(f"voxel resolution must be > 0, got {resolution}")
    if len(cloud) == 0:
        return PointCloud(cloud.points.copy(), None if cloud.colors is None else cloud.colors.copy())
    keys = np.floor(cloud.points / resolution).astype(np.int64)
    uniq, first, inverse, counts = np.unique(keys, axis=0, return_index=True,
                                             return_inverse=True, return_counts=True)
    inverse = inverse.reshape(-1)
    ref = cloud.points[first]
    # offset from a member point keeps single/duplicate-point voxels exact
    offs = np.zeros_like(ref)
    np.add.at(offs, inverse, cloud.points - ref[inverse])
    cent = ref + offs / counts[:, None]
    stray = np.any(np.floor(cent / resolution).astype(np.int64) != uniq, axis=1)
    cent[stray] = ref[stray]
    colors = None
    if cloud.colors is not None:
        colors = np.zeros((len(uniq), 3))
        np.add.at(colors, inverse, cloud.colors)
        colors /= counts[:, None]
    return PointCloud(cent, colors)


def crop_sliding_windows(cloud: PointCloud, window=(4.0, 3.0, 4.0),
                         stride=(2.0, 1.5, 2.0)) -> list[tuple[np.ndarray, PointCloud]]:
    """Tile the cloud's bounding box with overlapping windows.

    Membership is half-open ``[o, o + w)`` except on the last window of each
    axis, which is closed so the far face of the box is covered. Empty
    windows are skipped.
    """
    if len(cloud) == 0:
        return []
    window = np.asarray(window, dtype=np.float64)
    stride = np.asarray(stride, dtype=np.float64)
    lo = cloud.points.min(axis=0)
    hi = cloud.points.max(axis=0)
    axes = []
    for k in range(3):
        extent = hi[k] - lo[k]
        if extent <= window[k]:
            axes.append([lo[k]])
            continue
        n = int(math.ceil((extent - window[k]) / stride[k])) + 1
        origins = [lo[k] + i * stride[k] for i in range(n)]
        origins[-1] = min(origins[-1], hi[k] - window[k])
        axes.append(origins)
    out = []
    p = cloud.points
    for ix, ox in enumerate(axes[0]):
        for iy, oy in enumerate(axes[1]):
            for iz, oz in enumerate(axes[2]):
                origin = np.array([ox, oy, oz])
                last = (ix == len(axes[0]) - 1, iy == len(axes[1]) - 1, iz == len(axes[2]) - 1)
                mask = np.ones(len(p), dtype=bool)
                for k in range(3):
                    mask &= p[:, k] >= origin[k]
                    upper = origin[k] + window[k]
                    # the clamped origin can round so that origin + w < hi
                    mask &= (p[:, k] <= max(upper, hi[k])) if last[k] else (p[:, k] < upper)
                if mask.any():
                    out.append((origin, cloud.subset(mask)))
    return out


# ---------------------------------------------------------------------------
# I/O
# ---------------------------------------------------------------------------

def write_binary(cloud: PointCloud, path) -> None:
    rec = np.zeros(len(cloud), dtype=_RECORD)
    rec["xyz"] = cloud.points
    flags = 0
    if cloud.colors is not None:
        rec["rgb"] = np.clip(np.rint(cloud.colors * 255.0), 0, 255).astype(np.uint8)
        flags |= _FLAG_RGB
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(MAGIC, FORMAT_VERSION, flags, len(cloud)))
        fh.write(rec.tobytes())


def read_binary(path) -> PointCloud:
    data = Path(path).read_bytes()
    if len(data) < _HEADER.size:
        raise PointCloudFormatError(f"{path}: truncated header")
    magic, version, flags, count = _HEADER.unpack_from(data)
    if magic != MAGIC:
        raise PointCloudFormatError(f"{path}: bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise PointCloudFormatError(f"{path}: unsupported version {version}")
    body = data[_HEADER.size:]
    if len(body) != count * _RECORD.itemsize:
        raise PointCloudFormatError(
            f"{path}: expected {count} records ({count * _RECORD.itemsize} bytes), got {len(body)} bytes")
    rec = np.frombuffer(body, dtype=_RECORD, count=count)
    colors = rec["rgb"].astype(np.float64) / 255.0 if flags & _FLAG_RGB else None
    return PointCloud(rec["xyz"].copy(), colors)


def write_text(cloud: PointCloud, path) -> None:
    with open(path, "w") as fh:
        for i, p in enumerate(cloud.points):
            line = " ".join(repr(float(v)) for v in p)
            if cloud.colors is not None:
                line += " " + " ".join(repr(float(v)) for v in cloud.colors[i])
            fh.write(line + "\n")


def read_text(path) -> PointCloud:
    pts, cols = [], []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            parts = line.split()
            if not parts:
                continue
            if len(parts) not in (3, 6):
                raise PointCloudFormatError(f"{path}:{lineno}: expected 3 or 6 fields, got {len(parts)}")
            vals = [float(x) for x in parts]
            pts.append(vals[:3])
            if len(parts) == 6:
                cols.append(vals[3:])
    if cols and len(cols) != len(pts):
        raise PointCloudFormatError(f"{path}: mixed lines with and without colour")
    return PointCloud(np.array(pts).reshape(-1, 3), np.array(cols) if cols else None)
