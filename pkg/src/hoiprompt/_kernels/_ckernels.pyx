# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True
"""Compiled twins of the kernels in ``_pykernels``."""

import numpy as np
cimport numpy as cnp
from libc.math cimport INFINITY

cnp.import_array()

DEF MODE_SCENARIO_1 = 1
DEF MODE_SCENARIO_2 = 2


def solve_assignment(cost):
    cdef double[:, ::1] c = np.ascontiguousarray(cost, dtype=np.float64)
    cdef Py_ssize_t n = c.shape[0]
    cdef Py_ssize_t m = c.shape[1]
    if n > m:
        raise ValueError(f"more rows than columns ({n} > {m})")
    cdef double[::1] u = np.zeros(n + 1)
    cdef double[::1] v = np.zeros(m + 1)
    cdef double[::1] minv = np.empty(m + 1)
    cdef Py_ssize_t[::1] p = np.zeros(m + 1, dtype=np.intp)
    cdef Py_ssize_t[::1] way = np.zeros(m + 1, dtype=np.intp)
    cdef unsigned char[::1] used = np.zeros(m + 1, dtype=np.uint8)
    cdef Py_ssize_t i, j, j0, j1, i0
    cdef double delta, cur, ui0
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        for j in range(m + 1):
            minv[j] = INFINITY
            used[j] = 0
        while True:
            used[j0] = 1
            i0 = p[j0]
            ui0 = u[i0]
            delta = INFINITY
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = c[i0 - 1, j - 1] - ui0 - v[j]
                    if cur < minv[j]:
                        minv[j] = cur
                        way[j] = j0
                    if minv[j] < delta:
                        delta = minv[j]
                        j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[p[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if p[j0] == 0:
                break
        while True:
            j1 = way[j0]
            p[j0] = p[j1]
            j0 = j1
            if j0 == 0:
                break
    col = np.full(n, -1, dtype=np.int64)
    cdef long long[::1] colv = col
    for j in range(1, m + 1):
        if p[j]:
            colv[p[j] - 1] = j - 1
    return col


cdef inline double _iou(const double[:, ::1] a, Py_ssize_t ia,
                        const double[:, ::1] b, Py_ssize_t ib) noexcept nogil:
    cdef double iw = min(a[ia, 2], b[ib, 2]) - max(a[ia, 0], b[ib, 0])
    cdef double ih = min(a[ia, 3], b[ib, 3]) - max(a[ia, 1], b[ib, 1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    cdef double inter = iw * ih
    cdef double union = ((a[ia, 2] - a[ia, 0]) * (a[ia, 3] - a[ia, 1])
                         + (b[ib, 2] - b[ib, 0]) * (b[ib, 3] - b[ib, 1]) - inter)
    if union <= 0.0:
        return 0.0
    return inter / union


def greedy_match(det_h, det_o, det_img, gt_h, gt_o, gt_img, gt_occluded, int mode, double threshold):
    cdef const double[:, ::1] dh = np.ascontiguousarray(det_h, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] do = np.ascontiguousarray(det_o, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] gh = np.ascontiguousarray(gt_h, dtype=np.float64).reshape(-1, 4)
    cdef const double[:, ::1] go = np.ascontiguousarray(gt_o, dtype=np.float64).reshape(-1, 4)
    cdef const long long[::1] di = np.ascontiguousarray(det_img, dtype=np.int64)
    cdef const long long[::1] gi = np.ascontiguousarray(gt_img, dtype=np.int64)
    cdef const unsigned char[::1] occl = np.ascontiguousarray(gt_occluded, dtype=np.uint8)
    cdef Py_ssize_t n = dh.shape[0]
    cdef Py_ssize_t m = gh.shape[0]
    tp_arr = np.zeros(n, dtype=np.int8)
    matched_arr = np.full(n, -1, dtype=np.int64)
    cdef signed char[::1] tp = tp_arr
    cdef long long[::1] matched = matched_arr
    cdef unsigned char[::1] used = np.zeros(m, dtype=np.uint8)
    cdef Py_ssize_t d, g, best
    cdef double best_q, q, ih, io
    cdef bint null_box
    with nogil:
        for d in range(n):
            null_box = do[d, 0] == 0.0 and do[d, 1] == 0.0 and do[d, 2] == 0.0 and do[d, 3] == 0.0
            best = -1
            best_q = -1.0
            for g in range(m):
                if used[g] or gi[g] != di[d]:
                    continue
                ih = _iou(dh, d, gh, g)
                if ih < threshold:
                    continue
                if occl[g] and mode == MODE_SCENARIO_1:
                    if not null_box:
                        continue
                    q = ih
                elif occl[g] and mode == MODE_SCENARIO_2:
                    q = ih
                else:
                    io = _iou(do, d, go, g)
                    if io < threshold:
                        continue
                    q = min(ih, io)
                if q > best_q:
                    best = g
                    best_q = q
            if best >= 0:
                used[best] = 1
                tp[d] = 1
                matched[d] = best
    return tp_arr, matched_arr
