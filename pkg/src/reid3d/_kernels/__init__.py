"""Hot kernels with a compiled core and an interpreted fallback.

The compiled extension is used when it imports; set ``REID3D_PURE_PYTHON=1``
to force the fallback. Both expose the same functions:

linear_assignment
    Rectangular min-cost assignment (shortest augmenting path).
sinkhorn_log_forward, sinkhorn_log_backward
    Log-domain Sinkhorn iterations and their unrolled reverse pass.
rect_intersection_area, pairwise_iou3d
    Yaw-rotated rectangle clipping and gravity-aligned 3D box IoU.
grid_astar
    8-connected grid shortest path.
"""
import os

from . import _pykernels

_NAMES = (
    "linear_assignment",
    "sinkhorn_log_forward",
    "sinkhorn_log_backward",
    "rect_intersection_area",
    "pairwise_iou3d",
    "grid_astar",
)

_compiled = None
if os.environ.get("REID3D_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _ckernels as _compiled
    except ImportError:  # extension not built
        _compiled = None

_active = _compiled if _compiled is not None else _pykernels
BACKEND = _active.BACKEND

linear_assignment = _active.linear_assignment
sinkhorn_log_forward = _active.sinkhorn_log_forward
sinkhorn_log_backward = _active.sinkhorn_log_backward
rect_intersection_area = _active.rect_intersection_area
pairwise_iou3d = _active.pairwise_iou3d
grid_astar = _active.grid_astar


def available_backends():
    """Map of backend name -> module for every backend importable here."""
    out = {"python": _pykernels}
    if _compiled is not None:
        out["cython"] = _compiled
    else:
        try:
            from . import _ckernels
            out["cython"] = _ckernels
        except ImportError:
            pass
    return out
