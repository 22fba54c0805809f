import json
import math

import numpy as np
import pytest

from hoiprompt.data import CategoryRegistry
from hoiprompt.errors import DatasetParseError, InvalidInputError
from hoiprompt.evaluation import (
    Detection,
    GroundTruth,
    average_precision,
    class_ap,
    evaluate_hico,
    evaluate_vcoco,
    iou,
    is_rare,
    known_object_images,
    load_detections,
    match_detection,
    save_detections,
    write_report,
)
from oracles import brute_force_ap, brute_force_map, random_micro_instance

# classes: 0 = hold ball, 1 = throw ball, 2 = hold cup
REGISTRY = CategoryRegistry(("ball", "cup"), ("hold", "throw"), ((0, 0), (1, 0), (0, 1)))
H = (0.0, 0.0, 10.0, 10.0)
O = (20.0, 20.0, 30.0, 30.0)
NULL = (0.0, 0.0, 0.0, 0.0)


def _gt(img="a", cls=0, h=H, o=O, occluded=False):
    return GroundTruth(img, h, o, cls, REGISTRY.hoi_pairs[cls][1], occluded)


def _det(score, img="a", cls=0, h=H, o=O):
    return Detection(img, h, o, cls, score)


def test_iou_examples():
    assert iou((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    assert iou(H, H) == 1.0
    assert iou(NULL, NULL) == 0.0
    assert iou((0, 0, 1, 1), (1, 0, 2, 1)) == 0.0


def test_match_detection_rules():
    gts = [_gt()]
    assert match_detection(_det(1.0), gts) == 0
    assert match_detection(_det(1.0, h=(0, 0, 2, 2)), [_gt(h=(1, 1, 3, 3))]) is None
    near = _gt(h=(1.0, 0.0, 11.0, 10.0))
    assert match_detection(_det(1.0), [near, _gt()]) == 1


def test_two_detections_one_gt():
    ap = class_ap([_det(0.4), _det(0.9)], [_gt()])
    assert ap == 1.0
    flags_ap = class_ap([_det(0.9, h=(50, 50, 60, 60)), _det(0.4)], [_gt()])
    assert flags_ap == pytest.approx(0.5)


@pytest.mark.parametrize("flags,num_gt,expected", [
    ([1], 1, 1.0),
    ([1, 0, 1], 2, 5 / 6),
    ([0, 0], 1, 0.0),
    ([], 3, 0.0),
])
def test_average_precision_examples(flags, num_gt, expected):
    assert average_precision(flags, num_gt) == pytest.approx(expected, abs=1e-15)


def test_average_precision_without_gt():
    assert math.isnan(average_precision([1, 0], 0))
    with pytest.raises(InvalidInputError):
        average_precision([1], -1)


def test_five_sixths_through_matching():
    gts = [_gt(), _gt(img="b")]
    dets = [_det(0.9), _det(0.5, img="b", h=(40, 40, 50, 50)), _det(0.2, img="b")]
    assert class_ap(dets, gts) == pytest.approx(5 / 6, abs=1e-12)


def test_perfect_detection_both_settings():
    gts, dets = [_gt()], [_det(0.7)]
    for setting in ("default", "known_objects"):
        r = evaluate_hico(dets, gts, REGISTRY, {0: 50}, setting)
        assert r.full == 1.0 and r.per_class_ap == {0: 1.0}


def test_known_objects_ignores_images_without_the_object():
    # image "b" has only a cup; a ball-class FP there hurts Default only
    gts = [_gt("a", 0), _gt("b", 2)]
    dets = [_det(0.9, "b", 0), _det(0.5, "a", 0), _det(0.8, "b", 2)]
    default = evaluate_hico(dets, gts, REGISTRY, {}, "default")
    known = evaluate_hico(dets, gts, REGISTRY, {}, "known_objects")
    assert default.per_class_ap[0] == pytest.approx(0.5)
    assert known.per_class_ap[0] == 1.0
    assert known.full >= default.full
    assert known_object_images(0, gts, REGISTRY) == {"a"}


def test_rare_partition():
    gts = [_gt(cls=0), _gt(cls=1)]
    dets = [_det(0.9, cls=0), _det(0.9, cls=1, h=(50, 50, 60, 60))]
    r = evaluate_hico(dets, gts, REGISTRY, {0: 3, 1: 50})
    assert r.rare == r.per_class_ap[0] == 1.0
    assert r.non_rare == r.per_class_ap[1] == 0.0
    assert r.full == 0.5
    assert is_rare(2, {}) and not is_rare(1, {1: 10})


def test_classes_without_gt_are_excluded():
    r = evaluate_hico([_det(0.9, cls=2)], [_gt(cls=0)], REGISTRY, {})
    assert set(r.per_class_ap) == {0}
    assert r.full == 0.0 and r.non_rare is None
    assert evaluate_hico([], [], REGISTRY, {}).full is None
    with pytest.raises(InvalidInputError):
        evaluate_hico([], [], REGISTRY, {}, "everything")


def test_vcoco_scenarios():
    occluded = [_gt(o=NULL, occluded=True)]
    null_det = [_det(0.9, o=NULL)]
    box_det = [_det(0.9, o=(70, 70, 80, 80))]
    assert evaluate_vcoco(null_det, occluded, 1).ap_role == 1.0
    assert evaluate_vcoco(null_det, occluded, 2).ap_role == 1.0
    assert evaluate_vcoco(box_det, occluded, 1).ap_role == 0.0
    assert evaluate_vcoco(box_det, occluded, 2).ap_role == 1.0
    gts = [_gt(), _gt("b", 1)]
    dets = [_det(0.9), _det(0.3, "b", 1), _det(0.6, "b", 1, o=(21, 21, 31, 31))]
    assert evaluate_vcoco(dets, gts, 1).per_class_ap == evaluate_vcoco(dets, gts, 2).per_class_ap
    with pytest.raises(InvalidInputError):
        evaluate_vcoco(dets, gts, 3)


def _known_filter(gts):
    def allowed(cls):
        obj = REGISTRY.hoi_pairs[cls][1]
        return {g.image_id for g in gts if REGISTRY.hoi_pairs[g.hoi_class][1] == obj}
    return allowed


def micro_oracle_errors(seed, count):
    """Max abs gap between evaluators and the brute-force oracle over ``count`` instances."""
    rng = np.random.default_rng(seed)
    worst = 0.0
    for i in range(count):
        dets, gts = random_micro_instance(rng)
        gts = [GroundTruth(g.image_id, g.human_box, g.object_box, g.hoi_class, REGISTRY.hoi_pairs[g.hoi_class][1])
               for g in gts]
        for setting, flt in (("default", None), ("known_objects", _known_filter(gts))):
            got = evaluate_hico(dets, gts, REGISTRY, {}, setting).per_class_ap
            want = brute_force_map(dets, gts, image_filter=flt)
            assert got.keys() == want.keys()
            worst = max([worst] + [abs(got[c] - want[c]) for c in want])
        dets, gts = random_micro_instance(rng, occlusion=True)
        for scenario in (1, 2):
            got = evaluate_vcoco(dets, gts, scenario).per_class_ap
            want = brute_force_map(dets, gts, scenario=scenario)
            assert got.keys() == want.keys()
            worst = max([worst] + [abs(got[c] - want[c]) for c in want])
    return worst


def test_randomized_oracle():
    assert micro_oracle_errors(seed=11, count=60) <= 1e-9


def test_monotone_transform_is_exact():
    rng = np.random.default_rng(5)
    for _ in range(30):
        dets, gts = random_micro_instance(rng)
        moved = [Detection(d.image_id, d.human_box, d.object_box, d.hoi_class, math.exp(3 * d.score) - 7)
                 for d in dets]
        assert evaluate_hico(dets, gts, REGISTRY, {}).per_class_ap == evaluate_hico(moved, gts, REGISTRY, {}).per_class_ap


def test_bottom_duplicate_fp_never_raises_ap():
    rng = np.random.default_rng(9)
    for _ in range(40):
        dets, gts = random_micro_instance(rng)
        if not dets:
            continue
        for c in {g.hoi_class for g in gts}:
            cd = [d for d in dets if d.hoi_class == c]
            cg = [g for g in gts if g.hoi_class == c]
            base = class_ap(cd, cg)
            low = min([d.score for d in cd], default=0.0) - 1.0
            extra = Detection("nowhere", H, O, c, low)
            assert class_ap(cd + [extra], cg) <= base
            assert brute_force_ap(cd + [extra], cg) == pytest.approx(class_ap(cd + [extra], cg), abs=1e-12)


def test_detection_validation():
    with pytest.raises(InvalidInputError):
        Detection("a", H, O, 0, float("nan"))
    with pytest.raises(InvalidInputError):
        Detection("a", (5, 5, 1, 1), O, 0, 0.5)
    Detection("a", H, NULL, 0, 0.5)


def test_detections_file_round_trip(tmp_path):
    dets = [_det(0.25), _det(0.5, "b", 2, o=NULL)]
    path = tmp_path / "dets.jsonl"
    save_detections(dets, path)
    first = json.loads(path.read_text().splitlines()[0])
    assert set(first) == {"image_id", "h_box", "o_box", "hoi", "score"}
    assert load_detections(path) == dets
    path.write_text(path.read_text() + '{"image_id": "c"}\n')
    with pytest.raises(DatasetParseError) as info:
        load_detections(path)
    assert info.value.line == 3


def test_report_files(tmp_path):
    r = evaluate_hico([_det(0.9)], [_gt()], REGISTRY, {0: 50})
    write_report({"default": r.to_json()}, tmp_path / "r.json", tmp_path / "r.csv",
                 [{"setting": "default", "full": r.full, "rare": r.rare, "non_rare": r.non_rare}])
    doc = json.loads((tmp_path / "r.json").read_text())
    assert doc["default"]["per_class_ap"] == {"0": 1.0}
    lines = (tmp_path / "r.csv").read_text().splitlines()
    assert lines == ["setting,full,rare,non_rare", "default,1.0,,1.0"]
