import json

import numpy as np
import pytest

from factories import small_scene
from vfsa.evalbench import (
    attention_flop_model,
    average_precision_50,
    bench_attention,
    fsm_reduction,
    loglog_slope,
)
from vfsa.pipeline import PipelineConfig, run_refine
from vfsa.synthgen import generate


def test_flop_model_examples():
    assert attention_flop_model(1, 256) == 4 * 256 + 5
    assert attention_flop_model(8400, 256) / attention_flop_model(100, 256) == pytest.approx(7056)
    for n in (256, 512, 1024, 4096):
        ratio = attention_flop_model(2 * n, 256) / attention_flop_model(n, 256)
        assert 3.8 <= ratio <= 4.2
    with pytest.raises(ValueError):
        attention_flop_model(0, 4)


def test_loglog_slope_exact():
    ns = [512, 1024, 2048]
    assert loglog_slope(ns, [n**2 * 1e-9 for n in ns]) == pytest.approx(2.0)


def _gt():
    return {0: (np.array([[0, 0, 10, 10]], np.float32), np.array([0]))}


def test_ap_perfect_and_miss():
    gt = _gt()
    assert average_precision_50({0: (gt[0][0], np.array([0]), np.array([0.9]))}, gt) == 1.0
    far = np.array([[50, 50, 60, 60]], np.float32)
    assert average_precision_50({0: (far, np.array([0]), np.array([0.9]))}, gt) == 0.0
    assert average_precision_50({}, gt) == 0.0


def test_ap_ranking_matters():
    gt = _gt()
    boxes = np.array([[0, 0, 10, 10], [50, 50, 60, 60]], np.float32)
    good_first = {0: (boxes, np.array([0, 0]), np.array([0.9, 0.1]))}
    bad_first = {0: (boxes, np.array([0, 0]), np.array([0.1, 0.9]))}
    assert average_precision_50(good_first, gt) == 1.0
    assert average_precision_50(bad_first, gt) == 0.5


def test_ap_class_must_match_and_duplicates_are_fp():
    gt = _gt()
    assert average_precision_50({0: (gt[0][0], np.array([1]), np.array([0.9]))}, gt) == 0.0
    dup = {0: (np.repeat(gt[0][0], 2, 0), np.array([0, 0]), np.array([0.9, 0.8]))}
    assert average_precision_50(dup, gt) == 1.0
    dup_first = {0: (np.repeat(gt[0][0], 2, 0), np.array([0, 0]), np.array([0.8, 0.9]))}
    assert average_precision_50(dup_first, gt) == 1.0


def test_ap_needs_gt():
    with pytest.raises(ValueError):
        average_precision_50({}, {0: (np.zeros((0, 4)), np.zeros(0, np.int64))})


def test_noiseless_skip_fam_ap_is_one():
    frames, gt = generate(small_scene(0.0, frames=4))
    cfg = PipelineConfig(skip_fam=True, thresh_cap=0, d=8, classes=3, heads=1)
    dets = {r.frame_id: (r.boxes, r.class_ids, r.scores) for r in run_refine(frames, None, cfg)}
    gt_map = {k: (gt.boxes[k], gt.class_ids[k]) for k in gt.boxes}
    assert average_precision_50(dets, gt_map) == 1.0


def test_bench_report_shape():
    rep = bench_attention([64, 128, 512, 1024], d=32, repeats=3)
    assert [p.n for p in rep.points] == [64, 128, 512, 1024]
    assert all(p.attn_entries == p.n**2 and p.wall_time > 0 and len(p.all_times) == 3 for p in rep.points)
    assert rep.loglog_slope is not None
    data = json.loads(rep.to_json())
    assert data["points"][0]["flop_estimate"] == attention_flop_model(64, 32)
    assert "log-log slope" in rep.table()


def test_bench_needs_two_fit_points():
    assert bench_attention([64, 512], d=8, repeats=3).loglog_slope is None


def test_bench_validation():
    with pytest.raises(ValueError):
        bench_attention([256, 128])
    with pytest.raises(ValueError):
        bench_attention([128], repeats=2)


def test_fsm_reduction_ratios():
    out = fsm_reduction(dense_n=1024, selected_n=64, d=32)
    assert out["entry_ratio"] == 256
    assert out["flop_ratio"] == pytest.approx(256)
    assert out["time_ratio"] > 1


def _within_20pct(a, b):
    return all(abs(pa.wall_time - pb.wall_time) <= 0.2 * max(pa.wall_time, pb.wall_time) for pa, pb in zip(a.points, b.points))


@pytest.mark.slow
def test_bench_median_stability():
    # shared single-vCPU hosts see bursts of CPU steal; allow up to three pairs
    for _ in range(3):
        a = bench_attention([2048, 4096], d=256, repeats=3)
        b = bench_attention([2048, 4096], d=256, repeats=3)
        if _within_20pct(a, b):
            return
    pytest.fail(f"medians drifted: {[p.wall_time for p in a.points]} vs {[p.wall_time for p in b.points]}")
