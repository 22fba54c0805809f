import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from scipy.optimize import linear_sum_assignment

from hoiprompt import _kernels
from oracles import exhaustive_assignment


def test_backend_selection():
    assert "python" in _kernels.BACKENDS
    assert _kernels.BACKEND in _kernels.BACKENDS


@pytest.mark.parametrize("n,m", [(1, 1), (2, 3), (3, 3), (4, 6), (5, 5)])
def test_assignment_matches_exhaustive(kernels, n, m):
    rng = np.random.default_rng(n * 10 + m)
    for _ in range(10):
        cost = rng.normal(size=(n, m))
        cols = kernels.solve_assignment(cost)
        assert len(set(cols.tolist())) == n
        best, _ = exhaustive_assignment(cost)
        assert cost[np.arange(n), cols].sum() == pytest.approx(best, abs=1e-12)


def test_assignment_agrees_with_scipy_on_larger(kernels):
    rng = np.random.default_rng(1)
    for n, m in [(10, 30), (25, 25), (40, 64)]:
        cost = rng.random((n, m))
        r, c = linear_sum_assignment(cost)
        ours = kernels.solve_assignment(cost)
        assert cost[np.arange(n), ours].sum() == pytest.approx(cost[r, c].sum(), abs=1e-10)


def test_assignment_ties_and_constant(kernels):
    cols = kernels.solve_assignment(np.zeros((3, 3)))
    assert sorted(cols.tolist()) == [0, 1, 2]


def test_assignment_rejects_more_rows(kernels):
    with pytest.raises(ValueError):
        kernels.solve_assignment(np.zeros((3, 2)))


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 5), st.integers(0, 3), st.integers(0, 2**31 - 1))
def test_backends_agree_on_cost(n, extra, seed):
    cost = np.random.default_rng(seed).integers(-5, 6, size=(n, n + extra)).astype(float)
    totals = []
    for mod in _kernels.BACKENDS.values():
        cols = mod.solve_assignment(cost)
        totals.append(cost[np.arange(n), cols].sum())
    assert len(set(totals)) == 1


def _random_eval(rng, n_det=30, n_gt=10, n_img=3):
    def boxes(n):
        xy = rng.uniform(0, 20, (n, 2))
        return np.concatenate([xy, xy + rng.uniform(4, 10, (n, 2))], 1)
    occl = (rng.random(n_gt) < 0.3).astype(np.uint8)
    det_o = boxes(n_det)
    det_o[rng.random(n_det) < 0.2] = 0.0
    return (boxes(n_det), det_o, rng.integers(0, n_img, n_det), boxes(n_gt), boxes(n_gt),
            rng.integers(0, n_img, n_gt), occl)


@pytest.mark.parametrize("mode", [0, 1, 2])
def test_greedy_match_backends_identical(mode):
    rng = np.random.default_rng(mode)
    for _ in range(20):
        args = _random_eval(rng)
        results = [mod.greedy_match(*args, mode, 0.3) for mod in _kernels.BACKENDS.values()]
        for tp, matched in results[1:]:
            np.testing.assert_array_equal(tp, results[0][0])
            np.testing.assert_array_equal(matched, results[0][1])


def test_greedy_match_single_consumption(kernels):
    box = np.array([[0.0, 0.0, 10.0, 10.0]])
    dets = np.repeat(box, 2, 0)
    tp, matched = kernels.greedy_match(dets, dets, np.zeros(2, np.int64), box, box, np.zeros(1, np.int64),
                                       np.zeros(1, np.uint8), 0, 0.5)
    assert tp.tolist() == [1, 0]
    assert matched.tolist() == [0, -1]


def test_greedy_match_prefers_best_min_iou(kernels):
    det = np.array([[0.0, 0.0, 10.0, 10.0]])
    gt_h = np.array([[0.0, 0.0, 10.0, 12.0], [0.0, 0.0, 10.0, 10.0]])
    gt_o = np.array([[0.0, 0.0, 10.0, 10.0], [0.0, 0.0, 10.0, 11.0]])
    _, matched = kernels.greedy_match(det, det, np.zeros(1, np.int64), gt_h, gt_o, np.zeros(2, np.int64),
                                      np.zeros(2, np.uint8), 0, 0.5)
    assert matched.tolist() == [1]


def test_greedy_match_empty(kernels):
    empty = np.zeros((0, 4))
    tp, matched = kernels.greedy_match(empty, empty, np.zeros(0, np.int64), empty, empty, np.zeros(0, np.int64),
                                       np.zeros(0, np.uint8), 0, 0.5)
    assert tp.shape == (0,) and matched.shape == (0,)
