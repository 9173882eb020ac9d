"""Box kernels with a compiled core and a numpy fallback.

The compiled extension is picked at import time. Set ``INCDET_PURE_PYTHON=1``
to force the fallback. ``BACKEND`` names the active implementation.
"""

import os

import numpy as np

from . import _kernels_py

_impl = _kernels_py
BACKEND = "python"

if os.environ.get("INCDET_PURE_PYTHON", "") not in ("1", "true", "yes"):
    try:
        from . import _kernels as _compiled
    except ImportError:  # extension not built
        _compiled = None
    else:
        _impl = _compiled
        BACKEND = "cython"


def _as_boxes(x):
    return np.ascontiguousarray(np.asarray(x, dtype=np.float64).reshape(-1, 4))


def box_iou_matrix(a, b):
    """Pairwise IoU between ``(N, 4)`` and ``(M, 4)`` corner-format boxes."""
    return _impl.box_iou_matrix(_as_boxes(a), _as_boxes(b))


def nms(boxes, scores, thresh):
    """Greedy non-maximum suppression.

    Boxes are visited by descending score (ties: lower index first); any later
    box with IoU strictly above ``thresh`` against a kept box is dropped.
    Returns kept indices in visiting order.
    """
    boxes = _as_boxes(boxes)
    scores = np.ascontiguousarray(np.asarray(scores, dtype=np.float64).ravel())
    if boxes.shape[0] != scores.shape[0]:
        raise ValueError(f"{boxes.shape[0]} boxes but {scores.shape[0]} scores")
    if boxes.shape[0] == 0:
        return np.zeros(0, dtype=np.int64)
    return _impl.nms(boxes, scores, float(thresh))


def greedy_match(ious, thresh):
    """Match rows (detections, already ranked) to columns (ground truths).

    Each row takes the highest-IoU still-unmatched column whose IoU is at least
    ``thresh``. Returns ``(tp, matched)`` where ``matched[j]`` is the row that
    claimed column ``j`` or -1.
    """
    ious = np.ascontiguousarray(np.asarray(ious, dtype=np.float64))
    if ious.ndim != 2:
        raise ValueError("ious must be 2-D")
    return _impl.greedy_match(ious, float(thresh))


def use_backend(name):
    """Switch implementation at runtime ("cython" or "python"). Used by the benchmark."""
    global _impl, BACKEND
    if name == "python":
        _impl, BACKEND = _kernels_py, "python"
    elif name == "cython":
        from . import _kernels as compiled
        _impl, BACKEND = compiled, "cython"
    else:
        raise ValueError(f"unknown backend {name!r}")
