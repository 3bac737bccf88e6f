"""Detection metrics and the attention cost-scaling benchmark."""

from __future__ import annotations

import contextlib
import json
import time
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from threadpoolctl import threadpool_limits

from . import tensorcore as tc
from .fam import aggregate, attention_weights
from .geometry import iou_matrix

MIN_FIT_N = 512


def attention_flop_model(n: int, d: int) -> int:
    """Analytic cost of one attention layer: QK^T and AV products (2n^2 d
    multiply-adds each) plus a five-op-per-entry softmax pass."""
    if n < 1 or d < 1:
        raise ValueError("n and d must be >= 1")
    return 4 * n * n * d + 5 * n * n


@dataclass
class BenchPoint:
    n: int
    wall_time: float
    attn_entries: int
    flop_estimate: int
    all_times: list[float] = field(default_factory=list)


@dataclass
class BenchReport:
    d: int
    repeats: int
    parallel: bool
    points: list[BenchPoint]
    loglog_slope: float | None

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2)

    def table(self) -> str:
        lines = [f"{'n':>8} {'median_s':>12} {'attn_entries':>14} {'flops':>16}"]
        for p in self.points:
            lines.append(f"{p.n:>8d} {p.wall_time:>12.6f} {p.attn_entries:>14d} {p.flop_estimate:>16d}")
        slope = "n/a" if self.loglog_slope is None else f"{self.loglog_slope:.3f}"
        lines.append(f"log-log slope (n >= {MIN_FIT_N}): {slope}")
        return "\n".join(lines)


def loglog_slope(ns, times) -> float:
    x = np.log(np.asarray(ns, dtype=np.float64))
    y = np.log(np.asarray(times, dtype=np.float64))
    return float(np.polyfit(x, y, 1)[0])


@contextlib.contextmanager
def _blas_threads(limit: int | None):
    with threadpool_limits(limits=limit):
        yield


def time_attention(n: int, d: int, repeats: int, seed: int = 0, heads: int = 1) -> list[float]:
    """Wall times of two attention maps plus aggregation on random inputs,
    after one untimed warm-up pass."""
    rng = np.random.default_rng([seed, n])
    q_c, k_c, q_r, k_r, v = (rng.standard_normal((n, d), dtype=np.float32) for _ in range(5))
    conf = rng.random(n, dtype=np.float32)
    times = []
    for i in range(repeats + 1):
        t0 = time.perf_counter()
        a_c = attention_weights(q_c, k_c, "affinity", conf, heads)
        a_r = attention_weights(q_r, k_r, "affinity", conf, heads)
        aggregate(a_c, a_r, v)
        if i:  # first pass warms allocator and caches
            times.append(time.perf_counter() - t0)
        del a_c, a_r
    return times


def bench_attention(sizes, d: int = 256, repeats: int = 3, seed: int = 0, parallel: bool = False, heads: int = 1) -> BenchReport:
    """Median timings over ``sizes``.

    Timed kernels run through BLAS; single-threaded unless ``parallel``.
    Points with ``n < 512`` are reported but left out of the slope fit.
    """
    sizes = [int(s) for s in sizes]
    if sizes != sorted(sizes):
        raise ValueError("sizes must be ascending")
    if repeats < 3:
        raise ValueError("repeats must be >= 3")
    points = []
    with tc.kernel_mode(deterministic=False), _blas_threads(None if parallel else 1):
        for n in sizes:
            times = time_attention(n, d, repeats, seed, heads)
            points.append(BenchPoint(n, float(np.median(times)), n * n, attention_flop_model(n, d), times))
    fit = [p for p in points if p.n >= MIN_FIT_N]
    slope = loglog_slope([p.n for p in fit], [p.wall_time for p in fit]) if len(fit) >= 2 else None
    return BenchReport(d, repeats, parallel, points, slope)


def fsm_reduction(dense_n: int = 8400, selected_n: int = 100, d: int = 256, repeats: int = 3, seed: int = 0) -> dict:
    """Cost of aggregating all dense candidates versus a post-selection set."""
    dense = bench_attention([dense_n], d, repeats, seed).points[0]
    sparse = bench_attention([selected_n], d, repeats, seed).points[0]
    return {
        "dense_n": dense_n,
        "selected_n": selected_n,
        "flop_ratio": dense.flop_estimate / sparse.flop_estimate,
        "entry_ratio": dense.attn_entries / sparse.attn_entries,
        "time_ratio": dense.wall_time / sparse.wall_time,
        "dense_time": dense.wall_time,
        "selected_time": sparse.wall_time,
    }


def _ap_from_pr(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    ctp = np.cumsum(tp)
    cfp = np.cumsum(1 - tp)
    recall = ctp / n_gt
    precision = ctp / (ctp + cfp)
    mrec = np.concatenate([[0.0], recall])
    mpre = np.concatenate([[0.0], precision])
    for i in range(len(mpre) - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    return float(np.sum((mrec[1:] - mrec[:-1]) * mpre[1:]))


def average_precision_50(detections: Mapping, ground_truth: Mapping, iou_thresh: float = 0.5) -> float:
    """Mean over GT classes of the exact area under the precision envelope.

    ``detections`` maps frame id to (boxes, class_ids, scores) and
    ``ground_truth`` maps frame id to (boxes, class_ids). Detections are
    matched greedily in descending score order to the best-overlapping
    unmatched GT of their class with IoU >= ``iou_thresh``.
    """
    gt_classes = sorted({int(c) for _, cls in ground_truth.values() for c in np.asarray(cls).reshape(-1)})
    if not gt_classes:
        raise ValueError("AP is undefined without ground-truth boxes")
    aps = []
    for c in gt_classes:
        n_gt = 0
        gt_by_frame = {}
        for fid, (boxes, cls) in ground_truth.items():
            sel = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)[np.asarray(cls).reshape(-1) == c]
            gt_by_frame[fid] = sel
            n_gt += sel.shape[0]
        entries = []
        for fid, (boxes, cls, scores) in detections.items():
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            mask = np.asarray(cls).reshape(-1) == c
            for b, s in zip(boxes[mask], np.asarray(scores, dtype=np.float64).reshape(-1)[mask]):
                entries.append((-s, fid, len(entries), b))
        entries.sort(key=lambda e: (e[0], e[2]))
        used = {fid: np.zeros(g.shape[0], dtype=bool) for fid, g in gt_by_frame.items()}
        tp = np.zeros(len(entries))
        for i, (_, fid, _, b) in enumerate(entries):
            g = gt_by_frame.get(fid)
            if g is None or g.shape[0] == 0:
                continue
            ov = iou_matrix(b[None], g)[0]
            ov[used[fid]] = -1.0
            j = int(np.argmax(ov))
            if ov[j] >= iou_thresh:
                used[fid][j] = True
                tp[i] = 1.0
        aps.append(_ap_from_pr(tp, n_gt))
    return float(np.mean(aps))
