# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled box kernels. Mirrors ``_kernels_py`` exactly."""

import numpy as np
cimport numpy as cnp

cnp.import_array()


def box_iou_matrix(double[:, ::1] a, double[:, ::1] b):
    cdef Py_ssize_t n = a.shape[0], m = b.shape[0], i, j
    out_arr = np.zeros((n, m), dtype=np.float64)
    cdef double[:, ::1] out = out_arr
    cdef double area_a, area_b, iw, ih, inter, union
    for i in range(n):
        area_a = (a[i, 2] - a[i, 0]) * (a[i, 3] - a[i, 1])
        for j in range(m):
            iw = min(a[i, 2], b[j, 2]) - max(a[i, 0], b[j, 0])
            if iw <= 0:
                continue
            ih = min(a[i, 3], b[j, 3]) - max(a[i, 1], b[j, 1])
            if ih <= 0:
                continue
            inter = iw * ih
            area_b = (b[j, 2] - b[j, 0]) * (b[j, 3] - b[j, 1])
            union = area_a + area_b - inter
            if union > 0:
                out[i, j] = inter / union
    return out_arr


def nms(double[:, ::1] boxes, double[::1] scores, double thresh):
    cdef Py_ssize_t n = boxes.shape[0], ii, jj, i, j, n_keep = 0
    order_arr = np.argsort(-np.asarray(scores), kind="stable").astype(np.intp)
    cdef Py_ssize_t[::1] order = order_arr
    keep_arr = np.empty(n, dtype=np.intp)
    cdef Py_ssize_t[::1] keep = keep_arr
    cdef unsigned char[::1] dead = np.zeros(n, dtype=np.uint8)
    cdef double ix1, iy1, ix2, iy2, iarea, iw, ih, inter, union
    for ii in range(n):
        i = order[ii]
        if dead[i]:
            continue
        keep[n_keep] = i
        n_keep += 1
        ix1 = boxes[i, 0]
        iy1 = boxes[i, 1]
        ix2 = boxes[i, 2]
        iy2 = boxes[i, 3]
        iarea = (ix2 - ix1) * (iy2 - iy1)
        for jj in range(ii + 1, n):
            j = order[jj]
            if dead[j]:
                continue
            iw = min(ix2, boxes[j, 2]) - max(ix1, boxes[j, 0])
            if iw <= 0:
                continue
            ih = min(iy2, boxes[j, 3]) - max(iy1, boxes[j, 1])
            if ih <= 0:
                continue
            inter = iw * ih
            union = iarea + (boxes[j, 2] - boxes[j, 0]) * (boxes[j, 3] - boxes[j, 1]) - inter
            if union > 0 and inter / union > thresh:
                dead[j] = 1
    return keep_arr[:n_keep].astype(np.int64)


def greedy_match(double[:, ::1] ious, double thresh):
    cdef Py_ssize_t d = ious.shape[0], g = ious.shape[1], i, j, best
    cdef double best_iou
    tp_arr = np.zeros(d, dtype=bool)
    matched_arr = np.full(g, -1, dtype=np.int64)
    cdef cnp.npy_bool[::1] tp = tp_arr
    cdef cnp.int64_t[::1] matched = matched_arr
    for i in range(d):
        best = -1
        best_iou = thresh
        for j in range(g):
            if matched[j] >= 0:
                continue
            if ious[i, j] >= best_iou and (best < 0 or ious[i, j] > best_iou):
                best = j
                best_iou = ious[i, j]
        if best >= 0:
            tp[i] = True
            matched[best] = i
    return tp_arr, matched_arr
