"""Pure numpy implementations of the box kernels.

Used when the compiled ``_kernels`` extension is unavailable or when
``INCDET_PURE_PYTHON=1`` is set. Results are identical to the compiled path.
"""

import numpy as np


def box_iou_matrix(a, b):
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    iw = np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0])
    ih = np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1])
    valid = (iw > 0) & (ih > 0)
    inter = np.where(valid, iw * ih, 0.0)
    union = area_a[:, None] + area_b[None, :] - inter
    out = np.zeros_like(inter)
    ok = valid & (union > 0)
    out[ok] = inter[ok] / union[ok]
    return out


def nms(boxes, scores, thresh):
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64)
    order = np.argsort(-scores, kind="stable")
    keep = []
    while order.size > 0:
        i = order[0]
        keep.append(i)
        if order.size == 1:
            break
        ovr = box_iou_matrix(boxes[i:i + 1], boxes[order[1:]])[0]
        order = order[1:][ovr <= thresh]
    return np.asarray(keep, dtype=np.int64)


def greedy_match(ious, thresh):
    ious = np.asarray(ious, dtype=np.float64)
    d, g = ious.shape
    tp = np.zeros(d, dtype=bool)
    matched = np.full(g, -1, dtype=np.int64)
    for i in range(d):
        if g == 0:
            break
        cand = np.where(matched < 0, ious[i], -np.inf)
        j = int(np.argmax(cand))
        if cand[j] >= thresh:
            tp[i] = True
            matched[j] = i
    return tp, matched
