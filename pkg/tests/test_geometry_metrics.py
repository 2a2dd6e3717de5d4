import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from collabgen.fusion import DetectionSet
from collabgen.geometry import OrientedBox, box_corners, rotated_iou, points_in_box, wrap_angle
from collabgen.metrics import ap_from_matches, average_precision, match_detections


def mc_iou(a, b, n=400_000, seed=0):
    """Independent oracle: uniform point sampling over the union's bounding rectangle."""
    ca, cb = box_corners(*a), box_corners(*b)
    pts = np.vstack([ca, cb])
    lo, hi = pts.min(0), pts.max(0)
    g = np.random.default_rng(seed)
    xy = lo + (hi - lo) * g.random((n, 2))

    def inside(box):
        cx, cy, w, l, yaw = box
        dx, dy = xy[:, 0] - cx, xy[:, 1] - cy
        u = dx * math.cos(yaw) + dy * math.sin(yaw)
        v = -dx * math.sin(yaw) + dy * math.cos(yaw)
        return (np.abs(u) <= l / 2) & (np.abs(v) <= w / 2)

    ia, ib = inside(a), inside(b)
    union = (ia | ib).sum()
    return (ia & ib).sum() / union if union else 0.0


def random_pair(g):
    a = [g.uniform(-2, 2), g.uniform(-2, 2), g.uniform(0.5, 3), g.uniform(0.5, 4), g.uniform(-math.pi, math.pi)]
    b = [a[0] + g.uniform(-2, 2), a[1] + g.uniform(-2, 2), g.uniform(0.5, 3), g.uniform(0.5, 4),
         g.uniform(-math.pi, math.pi)]
    return a, b


def test_iou_identical_disjoint_and_half_offset():
    box = OrientedBox(0, 0, 2, 4, 0.3)
    assert rotated_iou(box, box) == pytest.approx(1.0)
    assert rotated_iou(box, OrientedBox(50, 0, 2, 4, 0.3)) == 0.0
    assert rotated_iou([0, 0, 1, 1, 0], [0.5, 0, 1, 1, 0]) == pytest.approx(1 / 3, abs=1e-12)


def test_iou_matches_monte_carlo_oracle():
    g = np.random.default_rng(7)
    worst = 0.0
    for k in range(100):
        a, b = random_pair(g)
        worst = max(worst, abs(rotated_iou(a, b) - mc_iou(a, b, seed=k)))
    assert worst < 0.005


box_st = st.tuples(st.floats(-5, 5), st.floats(-5, 5), st.floats(0.2, 5), st.floats(0.2, 5),
                   st.floats(-math.pi, math.pi))


@settings(max_examples=200, deadline=None)
@given(box_st, box_st)
def test_iou_symmetric_and_bounded(a, b):
    ab, ba = rotated_iou(a, b), rotated_iou(b, a)
    assert 0.0 <= ab <= 1.0
    assert ab == pytest.approx(ba, abs=1e-9)


@settings(max_examples=100, deadline=None)
@given(box_st, st.floats(-10, 10))
def test_iou_invariant_to_half_turn(a, shift):
    turned = (a[0], a[1], a[2], a[3], a[4] + math.pi)
    assert rotated_iou(a, turned) == pytest.approx(1.0, abs=1e-9)
    assert wrap_angle(shift) >= -math.pi and wrap_angle(shift) < math.pi


def test_points_in_box_rotated():
    box = OrientedBox(0, 0, 1, 4, math.pi / 2)
    assert points_in_box(np.array([0.0]), np.array([1.9]), box)[0]
    assert not points_in_box(np.array([1.9]), np.array([0.0]), box)[0]


def dets(boxes, scores):
    return DetectionSet(np.asarray(boxes, dtype=np.float64).reshape(-1, 5), np.asarray(scores, dtype=np.float64))


def test_ap_single_exact_match():
    g = np.array([[0, 0, 2, 4, 0]], dtype=float)
    assert average_precision([dets(g, [1.0])], [g], 0.5) == 1.0


def test_ap_no_predictions():
    g = np.array([[0, 0, 2, 4, 0]], dtype=float)
    assert average_precision([dets(np.zeros((0, 5)), [])], [g], 0.5) == 0.0


def test_ap_three_prediction_example():
    gts = np.array([[0, 0, 2, 4, 0], [20, 0, 2, 4, 0]], dtype=float)
    preds = np.array([[0, 0, 2, 4, 0], [40, 0, 2, 4, 0], [20, 0, 2, 4, 0]], dtype=float)
    ap = average_precision([dets(preds, [0.9, 0.8, 0.7])], [gts], 0.5)
    # hand integration: recall 0.5 at precision 1, recall 1.0 at precision 2/3
    assert ap == 1.0 * 0.5 + (2 / 3) * 0.5


def test_ap_from_matches_hand_oracle():
    assert ap_from_matches([0.9, 0.8, 0.7], [True, False, True], 2) == 1.0 * 0.5 + (2 / 3) * 0.5
    assert ap_from_matches([], [], 0) == 1.0
    assert ap_from_matches([0.3], [False], 0) == 0.0


def test_ap_rejects_bad_inputs():
    with pytest.raises(ValueError):
        average_precision([], [], 1.5)
    with pytest.raises(ValueError):
        average_precision([dets(np.zeros((0, 5)), [])], [], 0.5)


def test_greedy_matching_one_to_one():
    g = np.array([[0, 0, 2, 4, 0]], dtype=float)
    s, tp = match_detections(np.vstack([g, g]), [0.5, 0.9], g, 0.5)
    assert list(s) == [0.9, 0.5] and list(tp) == [True, False]


@settings(max_examples=60, deadline=None)
@given(st.integers(0, 10_000), st.floats(0.05, 0.9), st.floats(0.05, 0.9))
def test_ap_monotone_in_iou_threshold(seed, t1, t2):
    g = np.random.default_rng(seed)
    n_scene = 3
    gts, preds = [], []
    for _ in range(n_scene):
        k = g.integers(0, 4)
        gt = np.column_stack([g.uniform(-20, 20, k), g.uniform(-20, 20, k), g.uniform(1, 3, k),
                              g.uniform(2, 6, k), g.uniform(-3, 3, k)])
        jitter = gt + g.normal(0, 0.5, gt.shape) * np.array([1, 1, 0.1, 0.1, 0.2])
        jitter[:, 2:4] = np.abs(jitter[:, 2:4]) + 0.1
        extra = np.column_stack([g.uniform(-20, 20, 2), g.uniform(-20, 20, 2), [2, 2], [4, 4], [0, 0]])
        p = np.vstack([jitter, extra])
        gts.append(gt)
        preds.append(dets(p, g.random(len(p))))
    lo, hi = min(t1, t2), max(t1, t2)
    assert average_precision(preds, gts, lo) >= average_precision(preds, gts, hi) - 1e-12


def test_ap_deterministic():
    g = np.array([[0, 0, 2, 4, 0], [9, 9, 2, 4, 1]], dtype=float)
    p = [dets(g + 0.3, [0.4, 0.6])]
    assert average_precision(p, [g], 0.3) == average_precision(p, [g], 0.3)
