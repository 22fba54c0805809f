"""Slow, obviously-correct reference implementations used only by tests."""

import itertools
import math

import numpy as np


def exhaustive_assignment(cost):
    """Minimum total cost over every injective map of rows into columns."""
    cost = np.asarray(cost, dtype=np.float64)
    n, m = cost.shape
    best, best_cols = math.inf, None
    for cols in itertools.permutations(range(m), n):
        total = sum(cost[i, j] for i, j in enumerate(cols))
        if total < best:
            best, best_cols = total, cols
    return best, best_cols


def box_iou(a, b):
    x1, y1 = max(a[0], b[0]), max(a[1], b[1])
    x2, y2 = min(a[2], b[2]), min(a[3], b[3])
    inter = max(0.0, x2 - x1) * max(0.0, y2 - y1)
    area_a = (a[2] - a[0]) * (a[3] - a[1])
    area_b = (b[2] - b[0]) * (b[3] - b[1])
    union = area_a + area_b - inter
    return inter / union if union > 0 and inter > 0 else 0.0


def _qualifies(det, gt, scenario):
    """Match quality of a det/gt pair, or None; mirrors the protocol in words."""
    ih = box_iou(det.human_box, gt.human_box)
    if ih < 0.5:
        return None
    if gt.occluded and scenario == 1:
        return ih if tuple(det.object_box) == (0.0, 0.0, 0.0, 0.0) else None
    if gt.occluded and scenario == 2:
        return ih
    io = box_iou(det.object_box, gt.object_box)
    return min(ih, io) if io >= 0.5 else None


def tp_count(ranked, gts, scenario=0):
    consumed = set()
    tps = 0
    for det in ranked:
        best, best_q = None, -1.0
        for i, gt in enumerate(gts):
            if i in consumed or gt.image_id != det.image_id:
                continue
            q = _qualifies(det, gt, scenario)
            if q is not None and q > best_q:
                best, best_q = i, q
        if best is not None:
            consumed.add(best)
            tps += 1
    return tps


def brute_force_ap(dets, gts, scenario=0):
    """AP from the PR curve, recomputing matching from scratch at every cut-off."""
    if not gts:
        return float("nan")
    ranked = sorted(enumerate(dets), key=lambda p: (-p[1].score, p[0]))
    ranked = [d for _, d in ranked]
    points = [(0.0, 1.0)]
    for k in range(1, len(ranked) + 1):
        tp = tp_count(ranked[:k], gts, scenario)
        points.append((tp / len(gts), tp / k))
    ap = 0.0
    for k in range(1, len(points)):
        dr = points[k][0] - points[k - 1][0]
        if dr > 0:
            ap += dr * max(p for _, p in points[k:])
    return ap


def brute_force_map(dets, gts, classes=None, scenario=0, image_filter=None):
    """Per-class oracle AP; ``image_filter(cls)`` limits the detections counted."""
    by_cls = sorted({g.hoi_class for g in gts} if classes is None else set(classes) & {g.hoi_class for g in gts})
    out = {}
    for c in by_cls:
        cd = [d for d in dets if d.hoi_class == c]
        if image_filter is not None:
            allowed = image_filter(c)
            cd = [d for d in cd if d.image_id in allowed]
        out[c] = brute_force_ap(cd, [g for g in gts if g.hoi_class == c], scenario)
    return out


def random_micro_instance(rng, num_classes=3, occlusion=False):
    """At most 5 images, 6 detections, ``num_classes`` classes; boxes on a coarse grid so IoUs hit 0.5 often."""
    from hoiprompt.evaluation import Detection, GroundTruth

    def box():
        x1, y1 = rng.integers(0, 8, size=2)
        w, h = rng.integers(3, 8, size=2)
        return (float(x1), float(y1), float(x1 + w), float(y1 + h))

    def jitter(b):
        d = rng.integers(-1, 2, size=4)
        x1, y1 = b[0] + d[0], b[1] + d[1]
        return (float(x1), float(y1), float(max(x1 + 1, b[2] + d[2])), float(max(y1 + 1, b[3] + d[3])))

    images = [f"img{i}" for i in range(int(rng.integers(1, 6)))]
    gts = []
    for img in images:
        for _ in range(int(rng.integers(0, 3))):
            occluded = bool(occlusion and rng.random() < 0.4)
            obj = (0.0, 0.0, 0.0, 0.0) if occluded else box()
            gts.append(GroundTruth(img, box(), obj, int(rng.integers(0, num_classes)), occluded=occluded))
    dets = []
    for _ in range(int(rng.integers(0, 7))):
        if gts and rng.random() < 0.7:
            g = gts[int(rng.integers(0, len(gts)))]
            h = g.human_box if rng.random() < 0.5 else jitter(g.human_box)
            if g.occluded:
                o = (0.0, 0.0, 0.0, 0.0) if rng.random() < 0.5 else box()
            else:
                o = g.object_box if rng.random() < 0.5 else jitter(g.object_box)
            img = g.image_id
            cls = g.hoi_class if rng.random() < 0.8 else int(rng.integers(0, num_classes))
        else:
            h, o = box(), box()
            img = images[int(rng.integers(0, len(images)))]
            cls = int(rng.integers(0, num_classes))
        dets.append(Detection(img, h, o, cls, float(rng.integers(0, 5)) / 4))
    return dets, gts
