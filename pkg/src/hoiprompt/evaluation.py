"""Interaction mAP (Default / Known-Objects, Full / Rare / Non-rare) and role AP."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass
from pathlib import Path
from typing import Dict, Iterable, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from . import _kernels
from .data import CategoryRegistry, HOISample, normalized_to_corners
from .errors import DatasetParseError, InvalidInputError

IOU_THRESHOLD = 0.5
RARE_THRESHOLD = 10
SETTINGS = ("default", "known_objects")
NULL_BOX = (0.0, 0.0, 0.0, 0.0)


@dataclass(frozen=True)
class Detection:
    image_id: str
    human_box: Tuple[float, float, float, float]  # x1, y1, x2, y2 pixels
    object_box: Tuple[float, float, float, float]
    hoi_class: int
    score: float

    def __post_init__(self):
        if not math.isfinite(self.score):
            raise InvalidInputError(f"detection score must be finite, got {self.score}")
        for box in (self.human_box, self.object_box):
            if len(box) != 4 or box[2] < box[0] or box[3] < box[1]:
                raise InvalidInputError(f"box has negative extent: {box!r}")

    def to_json(self) -> dict:
        return {"image_id": self.image_id, "h_box": list(self.human_box), "o_box": list(self.object_box),
                "hoi": self.hoi_class, "score": self.score}

    @classmethod
    def from_json(cls, doc: Mapping) -> "Detection":
        return cls(str(doc["image_id"]), tuple(float(x) for x in doc["h_box"]),
                   tuple(float(x) for x in doc["o_box"]), int(doc["hoi"]), float(doc["score"]))


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    human_box: Tuple[float, float, float, float]
    object_box: Tuple[float, float, float, float]
    hoi_class: int
    object_class: int = -1
    occluded: bool = False  # object not visible; role AP scenarios treat these specially


@dataclass
class APReport:
    per_class_ap: Dict[int, float]
    full: Optional[float]
    rare: Optional[float]
    non_rare: Optional[float]
    setting: str = "default"

    def to_json(self) -> dict:
        return {
            "setting": self.setting,
            "full": self.full,
            "rare": self.rare,
            "non_rare": self.non_rare,
            "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())},
        }


@dataclass
class RoleAPReport:
    per_class_ap: Dict[int, float]
    ap_role: Optional[float]
    scenario: int

    def to_json(self) -> dict:
        return {"scenario": self.scenario, "ap_role": self.ap_role,
                "per_class_ap": {str(k): v for k, v in sorted(self.per_class_ap.items())}}


def iou(a, b) -> float:
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    union = (a[2] - a[0]) * (a[3] - a[1]) + (b[2] - b[0]) * (b[3] - b[1]) - inter
    return inter / union if union > 0 else 0.0


def match_detection(det: Detection, gts: Sequence[GroundTruth], threshold: float = IOU_THRESHOLD) -> Optional[int]:
    """Index of the gt this detection would consume, or None.

    ``gts`` are the still-unmatched ground truths of the detection's class
    and image; both IoUs must reach the threshold and the gt with the
    largest ``min(IoU_h, IoU_o)`` wins.
    """
    best, best_q = None, -1.0
    for i, gt in enumerate(gts):
        q = min(iou(det.human_box, gt.human_box), iou(det.object_box, gt.object_box))
        if q >= threshold and q > best_q:
            best, best_q = i, q
    return best


def average_precision(flags: Sequence[int], num_gt: int) -> float:
    """All-point interpolated AP of a ranked TP/FP list; NaN when ``num_gt`` is 0."""
    if num_gt < 0:
        raise InvalidInputError(f"num_gt must be nonnegative, got {num_gt}")
    if num_gt == 0:
        return float("nan")
    flags = np.asarray(flags, dtype=np.float64)
    if flags.size == 0:
        return 0.0
    tp = np.cumsum(flags)
    fp = np.cumsum(1.0 - flags)
    recall = tp / num_gt
    precision = tp / np.maximum(tp + fp, np.finfo(np.float64).tiny)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    idx = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[idx + 1] - mrec[idx]) * mpre[idx + 1]))


def _rank(dets: Sequence[Detection]) -> List[Detection]:
    """Descending score; equal scores keep input order."""
    order = np.argsort(-np.asarray([d.score for d in dets], dtype=np.float64), kind="stable")
    return [dets[i] for i in order]


def class_ap(dets: Sequence[Detection], gts: Sequence[GroundTruth], mode: int = _kernels.MODE_DEFAULT,
             threshold: float = IOU_THRESHOLD) -> float:
    """AP of one class; ``dets`` and ``gts`` are already restricted to it."""
    if not gts:
        return float("nan")
    ranked = _rank(dets)
    if not ranked:
        return 0.0
    images = {img: i for i, img in enumerate(sorted({d.image_id for d in ranked} | {g.image_id for g in gts}))}
    tp, _ = _kernels.greedy_match(
        np.array([d.human_box for d in ranked], dtype=np.float64).reshape(-1, 4),
        np.array([d.object_box for d in ranked], dtype=np.float64).reshape(-1, 4),
        np.array([images[d.image_id] for d in ranked], dtype=np.int64),
        np.array([g.human_box for g in gts], dtype=np.float64).reshape(-1, 4),
        np.array([g.object_box for g in gts], dtype=np.float64).reshape(-1, 4),
        np.array([images[g.image_id] for g in gts], dtype=np.int64),
        np.array([g.occluded for g in gts], dtype=np.uint8),
        mode,
        threshold,
    )
    return average_precision(tp, len(gts))


def _mean(values: Iterable[float]) -> Optional[float]:
    vals = [v for v in values if not math.isnan(v)]
    return float(np.mean(vals)) if vals else None


def is_rare(hoi_id: int, counts: Mapping[int, int]) -> bool:
    return counts.get(hoi_id, 0) < RARE_THRESHOLD


def known_object_images(hoi_id: int, gts: Sequence[GroundTruth], registry: CategoryRegistry) -> set:
    """Images that count for a class under Known Objects: those whose gt includes its object category."""
    obj = registry.hoi_pairs[hoi_id][1]
    return {g.image_id for g in gts if _object_of(g, registry) == obj}


def _object_of(gt: GroundTruth, registry: CategoryRegistry) -> int:
    return gt.object_class if gt.object_class >= 0 else registry.hoi_pairs[gt.hoi_class][1]


def _by_class(items) -> Dict[int, list]:
    out: Dict[int, list] = {}
    for x in items:
        out.setdefault(x.hoi_class, []).append(x)
    return out


def evaluate_hico(dets: Sequence[Detection], gts: Sequence[GroundTruth], registry: CategoryRegistry,
                  counts: Mapping[int, int], setting: str = "default",
                  classes: Optional[Iterable[int]] = None) -> APReport:
    """Per-class AP and Full/Rare/Non-rare means.

    Classes without test ground truth get no AP and are left out of every
    mean.  ``classes`` restricts the evaluated set (e.g. a zero-shot partition).
    """
    if setting not in SETTINGS:
        raise InvalidInputError(f"setting must be one of {SETTINGS}, got {setting!r}")
    det_by, gt_by = _by_class(dets), _by_class(gts)
    wanted = sorted(set(gt_by) if classes is None else set(classes) & set(gt_by))
    per_class = {}
    for c in wanted:
        cdets = det_by.get(c, [])
        if setting == "known_objects":
            allowed = known_object_images(c, gts, registry)
            cdets = [d for d in cdets if d.image_id in allowed]
        per_class[c] = class_ap(cdets, gt_by[c])
    return APReport(
        per_class,
        _mean(per_class.values()),
        _mean(v for c, v in per_class.items() if is_rare(c, counts)),
        _mean(v for c, v in per_class.items() if not is_rare(c, counts)),
        setting,
    )


def evaluate_vcoco(dets: Sequence[Detection], gts: Sequence[GroundTruth], scenario: int = 1) -> RoleAPReport:
    """Role AP: scenario 1 needs the null object box for occluded gts, scenario 2 ignores it."""
    modes = {1: _kernels.MODE_SCENARIO_1, 2: _kernels.MODE_SCENARIO_2}
    if scenario not in modes:
        raise InvalidInputError(f"scenario must be 1 or 2, got {scenario!r}")
    det_by, gt_by = _by_class(dets), _by_class(gts)
    per_class = {c: class_ap(det_by.get(c, []), gt_by[c], modes[scenario]) for c in sorted(gt_by)}
    return RoleAPReport(per_class, _mean(per_class.values()), scenario)


# ---------------------------------------------------------------------------
# conversion and files


def gts_from_samples(samples: Sequence[HOISample]) -> List[GroundTruth]:
    out = []
    for s in samples:
        for t in s.triplets:
            out.append(GroundTruth(
                s.image_id,
                tuple(normalized_to_corners(t.human_box, s.width, s.height)),
                tuple(normalized_to_corners(t.object_box, s.width, s.height)),
                t.hoi_class,
                t.object_class,
            ))
    return out


def detections_from_predictions(image_ids: Sequence[str], predictions) -> List[Detection]:
    """Flatten per-image scored predictions (objects with human_box/object_box/hoi_class/score)."""
    out = []
    for image_id, preds in zip(image_ids, predictions):
        for p in preds:
            out.append(Detection(image_id, tuple(p.human_box), tuple(p.object_box), int(p.hoi_class), float(p.score)))
    return out


def save_detections(dets: Sequence[Detection], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for d in dets:
            fh.write(json.dumps(d.to_json()) + "\n")


def load_detections(path) -> List[Detection]:
    out = []
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                out.append(Detection.from_json(json.loads(line)))
            except (ValueError, KeyError, TypeError) as exc:
                raise DatasetParseError(lineno, f"bad detection record: {exc}") from exc
    return out


def write_report(report: Mapping, path, csv_path=None, rows: Optional[Sequence[Mapping]] = None) -> None:
    """JSON report, plus an optional CSV table of the aggregate rows."""
    Path(path).write_text(json.dumps(report, indent=2, sort_keys=True) + "\n")
    if csv_path is not None and rows:
        fields = list(rows[0].keys())
        with open(csv_path, "w", newline="", encoding="utf-8") as fh:
            writer = csv.DictWriter(fh, fieldnames=fields)
            writer.writeheader()
            for row in rows:
                writer.writerow({k: "" if row.get(k) is None else row.get(k) for k in fields})
