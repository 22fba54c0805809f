"""Pure-Python reference kernels.

Same signatures and semantics as the compiled module; used when the
extension is unavailable or ``HOIPROMPT_PURE_PYTHON=1`` is set.
"""

import math

import numpy as np

MODE_DEFAULT = 0
MODE_SCENARIO_1 = 1
MODE_SCENARIO_2 = 2


def solve_assignment(cost):
    """Minimum-cost assignment of every row to a distinct column.

    ``cost`` is an ``n x m`` float64 array with ``n <= m``.  Returns an int64
    array ``col`` of length ``n`` where ``col[i]`` is the column given to row i.
    Shortest augmenting path with dual potentials, O(n^2 m).
    """
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    if n > m:
        raise ValueError(f"more rows than columns ({n} > {m})")
    c = cost.tolist()
    inf = math.inf
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    p = [0] * (m + 1)
    way = [0] * (m + 1)
    for i in range(1, n + 1):
        p[0] = i
        j0 = 0
        minv = [inf] * (m + 1)
        used = [False] * (m + 1)
        while True:
            used[j0] = True
            i0 = p[j0]
            row = c[i0 - 1]
            ui0 = u[i0]
            delta = inf
            j1 = 0
            for j in range(1, m + 1):
                if not used[j]:
                    cur = row[j - 1] - ui0 - v[j]
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
    for j in range(1, m + 1):
        if p[j]:
            col[p[j] - 1] = j - 1
    return col


def _iou(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    if union <= 0.0:
        return 0.0
    return inter / union


def greedy_match(det_h, det_o, det_img, gt_h, gt_o, gt_img, gt_occluded, mode, threshold):
    """Greedy TP/FP assignment of pre-sorted detections to ground truth.

    Detections must already be in descending score order.  Each detection
    consumes at most one unmatched gt of the same image; among qualifying gts
    the one with the largest ``min(IoU_h, IoU_o)`` wins (first index on ties).
    Returns ``(tp, matched)``: int8 flags and the consumed gt index or -1.
    """
    det_h = np.asarray(det_h, dtype=np.float64).tolist()
    det_o = np.asarray(det_o, dtype=np.float64).tolist()
    gt_h = np.asarray(gt_h, dtype=np.float64).tolist()
    gt_o = np.asarray(gt_o, dtype=np.float64).tolist()
    det_img = np.asarray(det_img, dtype=np.int64).tolist()
    gt_img = np.asarray(gt_img, dtype=np.int64).tolist()
    occl = np.asarray(gt_occluded, dtype=np.uint8).tolist()
    n, m = len(det_h), len(gt_h)
    used = [False] * m
    tp = np.zeros(n, dtype=np.int8)
    matched = np.full(n, -1, dtype=np.int64)
    for d in range(n):
        dh, do = det_h[d], det_o[d]
        null_box = do[0] == 0.0 and do[1] == 0.0 and do[2] == 0.0 and do[3] == 0.0
        best, best_q = -1, -1.0
        for g in range(m):
            if used[g] or gt_img[g] != det_img[d]:
                continue
            ih = _iou(dh, gt_h[g])
            if ih < threshold:
                continue
            if occl[g] and mode == MODE_SCENARIO_1:
                if not null_box:
                    continue
                q = ih
            elif occl[g] and mode == MODE_SCENARIO_2:
                q = ih
            else:
                io = _iou(do, gt_o[g])
                if io < threshold:
                    continue
                q = min(ih, io)
            if q > best_q:
                best, best_q = g, q
        if best >= 0:
            used[best] = True
            tp[d] = 1
            matched[d] = best
    return tp, matched
