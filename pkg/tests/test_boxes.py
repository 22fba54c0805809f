import pytest
import torch
from hypothesis import given, strategies as st

from hoiprompt.boxes import cxcywh_to_xyxy, elementwise_giou, giou, iou_xyxy, pairwise_giou, xyxy_to_cxcywh
from hoiprompt.errors import DomainError


def _cxcywh(x1, y1, x2, y2):
    return ((x1 + x2) / 2, (y1 + y2) / 2, x2 - x1, y2 - y1)


def test_identical_boxes():
    assert giou((0.5, 0.5, 0.2, 0.3), (0.5, 0.5, 0.2, 0.3)) == pytest.approx(1.0)


def test_disjoint_corner_boxes():
    assert giou(_cxcywh(0, 0, 1, 1), _cxcywh(2, 0, 3, 1)) == pytest.approx(-1 / 3)


def test_overlap_iou_one_seventh():
    assert iou_xyxy((0, 0, 2, 2), (1, 1, 3, 3)) == pytest.approx(1 / 7)
    g = giou(_cxcywh(0, 0, 2, 2), _cxcywh(1, 1, 3, 3))
    assert g == pytest.approx(1 / 7 - (9 - 7) / 9)


def test_nonpositive_extent_rejected():
    with pytest.raises(DomainError):
        giou((0.5, 0.5, 0.0, 0.1), (0.5, 0.5, 0.1, 0.1))


def test_conversions_round_trip():
    b = torch.tensor([[0.3, 0.4, 0.2, 0.1], [0.5, 0.5, 1.0, 1.0]])
    torch.testing.assert_close(xyxy_to_cxcywh(cxcywh_to_xyxy(b)), b)


box = st.tuples(st.floats(0.1, 0.9), st.floats(0.1, 0.9), st.floats(0.01, 0.5), st.floats(0.01, 0.5))


@given(box, box)
def test_scalar_and_tensor_giou_agree(a, b):
    ta = cxcywh_to_xyxy(torch.tensor([a], dtype=torch.float64))
    tb = cxcywh_to_xyxy(torch.tensor([b], dtype=torch.float64))
    ref = giou(a, b)
    assert -1.0 < ref <= 1.0 + 1e-12
    assert float(pairwise_giou(ta, tb)[0, 0]) == pytest.approx(ref, abs=1e-9)
    assert float(elementwise_giou(ta, tb)[0]) == pytest.approx(ref, abs=1e-9)


@given(box, box)
def test_giou_symmetric(a, b):
    assert giou(a, b) == pytest.approx(giou(b, a), abs=1e-12)
