import numpy as np
import pytest
from factories import make_frame, small_scene
from hypothesis import given, settings
from hypothesis import strategies as st

from vfsa import fsm
from vfsa.geometry import iou_matrix, nms_indices
from vfsa.synthgen import generate


def random_frame(rng, n, frame_id=0):
    xy = rng.uniform(0, 200, (n, 2))
    wh = rng.uniform(4, 60, (n, 2))
    conf = np.round(rng.uniform(0, 1, n), 2)
    return make_frame(np.concatenate([xy, xy + wh], 1), conf, frame_id=frame_id, rng=rng)


def test_confidence_is_objectness_times_best_class():
    cls = np.array([[0.2, 0.6], [0.9, 0.1]], dtype=np.float32)
    f = make_frame([[0, 0, 5, 5], [1, 1, 6, 6]], obj=[0.5, 0.4], cls=cls)
    assert f.confidence.tolist() == [np.float32(0.5) * np.float32(0.6), np.float32(0.4) * np.float32(0.9)]
    assert f.candidate(0).confidence == pytest.approx(0.3)


def test_frame_validation():
    with pytest.raises(ValueError):
        make_frame([[0, 0, 5, 5]], [1.5])
    with pytest.raises(ValueError):
        make_frame([[5, 0, 5, 5]], [0.5])


def test_topk_nms_examples():
    f = make_frame([[0, 0, 10, 10], [0, 0, 10, 10]], [0.9, 0.8])
    sel = fsm.select_topk_nms(f, k=2, n=2, nms_iou=0.75)
    assert sel.indices.tolist() == [0]
    one = make_frame([[0, 0, 3, 3]], [0.2])
    assert fsm.select_topk_nms(one).indices.tolist() == [0]
    empty = make_frame(np.zeros((0, 4)), np.zeros(0))
    assert len(fsm.select_topk_nms(empty)) == 0


def test_topk_nms_dense_frame_bounded(rng):
    f = random_frame(rng, 8400)
    sel = fsm.select_topk_nms(f, 750, 30, 0.75)
    assert len(sel) <= 30
    assert sel.pipeline_tag == "topk_nms"


def test_topk_rejects_bad_counts():
    f = make_frame([[0, 0, 3, 3]], [0.2])
    with pytest.raises(ValueError):
        fsm.select_topk_nms(f, k=2, n=3)


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 120), st.integers(1, 40), st.integers(1, 60))
def test_topk_nms_properties(seed, size, n, extra_k):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, size)
    k = n + extra_k
    sel = fsm.select_topk_nms(f, k, n, 0.75)
    assert len(sel) <= min(n, size)
    # survivors of NMS over the top-k pool; selection is their best prefix
    order = np.lexsort((np.arange(size), -f.confidence.astype(np.float64)))[:k]
    survivors = order[nms_indices(f.boxes[order], f.confidence[order], 0.75)]
    rest = np.setdiff1d(survivors, sel.indices)
    if len(sel) and rest.size:
        assert f.confidence[sel.indices].min() >= f.confidence[rest].max()


def test_thresh_examples():
    f = make_frame([[0, 0, 4, 4]] * 3, [0.9, 0.0005, 0.3])
    assert fsm.select_thresh(f, 0.001).indices.tolist() == [0, 2]
    z = make_frame([[0, 0, 4, 4]] * 4, [0.0] * 4)
    assert len(fsm.select_thresh(z)) == 0
    half = make_frame([[0, 0, 4, 4]] * 50, [0.5] * 50)
    assert len(fsm.select_thresh(half, 0.001)) == 50


def test_thresh_cap_keeps_best_in_original_order():
    conf = [0.1, 0.9, 0.5, 0.7, 0.2]
    f = make_frame([[0, 0, 4, 4]] * 5, conf)
    assert fsm.select_thresh(f, 0.001, cap=3).indices.tolist() == [1, 2, 3]


@settings(max_examples=100, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(0, 80), st.floats(0, 0.99))
def test_thresh_is_filter_and_idempotent(seed, size, thresh):
    rng = np.random.default_rng(seed)
    f = random_frame(rng, size)
    sel = fsm.select_thresh(f, thresh)
    assert sel.indices.tolist() == [i for i in range(size) if f.confidence[i] > np.float32(thresh)]
    again = fsm.select_thresh(sel.selected, thresh)
    assert again.indices.tolist() == list(range(len(sel)))
    assert np.array_equal(again.selected.boxes, sel.selected.boxes)


def test_recall_examples():
    gt = {0: np.array([[0, 0, 10, 10], [100, 100, 110, 110]], dtype=np.float64)}
    # first GT covered at IoU 0.6, second best IoU 0.4
    a = np.array([[0, 0, 10, 6]])
    b = np.array([[100, 100, 110, 104]])
    assert iou_matrix(gt[0][:1], a)[0, 0] == pytest.approx(0.6)
    assert iou_matrix(gt[0][1:], b)[0, 0] == pytest.approx(0.4)
    assert fsm.class_agnostic_recall({0: np.vstack([a, b])}, gt) == 0.5
    assert fsm.class_agnostic_recall({0: gt[0]}, gt) == 1.0
    assert fsm.class_agnostic_recall({0: np.zeros((0, 4))}, gt) == 0.0
    with pytest.raises(ValueError):
        fsm.class_agnostic_recall({0: a}, {0: np.zeros((0, 4))})


def test_recall_skips_empty_gt_frames():
    gt = {0: np.zeros((0, 4)), 1: np.array([[0, 0, 4, 4]])}
    assert fsm.class_agnostic_recall({0: np.array([[50, 50, 60, 60]]), 1: np.array([[0, 0, 4, 4]])}, gt) == 1.0


def test_recall_monotone_in_iou_thresh(rng):
    gt = {0: rng.uniform(0, 50, (10, 2))}
    gt[0] = np.concatenate([gt[0], gt[0] + 20], 1)
    sel = {0: gt[0] + rng.normal(0, 4, gt[0].shape)}
    sel[0][:, 2:] = np.maximum(sel[0][:, 2:], sel[0][:, :2] + 1)
    values = [fsm.class_agnostic_recall(sel, gt, t) for t in np.linspace(0.05, 1.0, 20)]
    assert all(a >= b for a, b in zip(values, values[1:]))


def test_mean_selected():
    def fake(n):
        f = make_frame([[0, 0, 3, 3]] * n, [0.5] * n)
        return fsm.select_thresh(f)

    assert fsm.mean_selected_per_frame([fake(30), fake(30)]) == 30.0
    assert fsm.mean_selected_per_frame([fake(0), fake(10)]) == 5.0
    with pytest.raises(ValueError):
        fsm.mean_selected_per_frame([])


def test_noiseless_recall_both_pipelines():
    frames, gt = generate(small_scene(0.0))
    for select in (lambda f: fsm.select_thresh(f, 0.001), lambda f: fsm.select_topk_nms(f, 750, 30, 0.75)):
        assert fsm.class_agnostic_recall([select(f) for f in frames], gt.boxes, 0.5) == 1.0
