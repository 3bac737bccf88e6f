"""Corner-format boxes, IoU and greedy non-maximum suppression."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np


@dataclass(frozen=True)
class Box:
    x1: float
    y1: float
    x2: float
    y2: float

    def __post_init__(self) -> None:
        if not (self.x2 > self.x1 and self.y2 > self.y1):
            raise ValueError(f"box must have positive area: {self}")

    @property
    def area(self) -> float:
        return (self.x2 - self.x1) * (self.y2 - self.y1)

    def as_tuple(self) -> tuple[float, float, float, float]:
        return (self.x1, self.y1, self.x2, self.y2)

    @classmethod
    def from_center(cls, cx: float, cy: float, w: float, h: float) -> "Box":
        return cls(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


@dataclass(frozen=True)
class ScoredBox:
    box: Box
    confidence: float
    class_id: int = 0

    def __post_init__(self) -> None:
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence must lie in [0, 1], got {self.confidence}")


def iou(a: Box, b: Box) -> float:
    iw = max(0.0, min(a.x2, b.x2) - max(a.x1, b.x1))
    ih = max(0.0, min(a.y2, b.y2) - max(a.y1, b.y1))
    inter = iw * ih
    union = a.area + b.area - inter
    return inter / union


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise IoU between (N, 4) and (M, 4) corner boxes, in float64.

    Uses the same operation order as :func:`iou` so both agree exactly.
    """
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    iw = np.maximum(0.0, np.minimum(a[:, None, 2], b[None, :, 2]) - np.maximum(a[:, None, 0], b[None, :, 0]))
    ih = np.maximum(0.0, np.minimum(a[:, None, 3], b[None, :, 3]) - np.maximum(a[:, None, 1], b[None, :, 1]))
    inter = iw * ih
    area_a = (a[:, 2] - a[:, 0]) * (a[:, 3] - a[:, 1])
    area_b = (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / union


def nms_indices(boxes, scores, iou_thresh: float, class_ids=None) -> np.ndarray:
    """Greedy NMS over arrays; returns kept indices in keep order.

    Ties in score go to the lower index. A box is suppressed only when
    its IoU with a kept box is strictly greater than ``iou_thresh``.
    With ``class_ids`` given, suppression happens only within a class.
    """
    if not 0.0 < iou_thresh <= 1.0:
        raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
    boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
    scores = np.asarray(scores, dtype=np.float64).reshape(-1)
    n = boxes.shape[0]
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    order = np.lexsort((np.arange(n), -scores))
    boxes_o = boxes[order]
    cls_o = None if class_ids is None else np.asarray(class_ids).reshape(-1)[order]
    alive = np.ones(n, dtype=bool)
    keep = []
    for i in range(n):
        if not alive[i]:
            continue
        keep.append(order[i])
        rest = np.flatnonzero(alive[i + 1:]) + i + 1
        if rest.size == 0:
            break
        ov = iou_matrix(boxes_o[i:i + 1], boxes_o[rest])[0]
        hit = ov > iou_thresh
        if cls_o is not None:
            hit &= cls_o[rest] == cls_o[i]
        alive[rest[hit]] = False
    return np.asarray(keep, dtype=np.int64)


def nms(candidates: Sequence[ScoredBox], iou_thresh: float, per_class: bool = False) -> list[ScoredBox]:
    if not candidates:
        if not 0.0 < iou_thresh <= 1.0:
            raise ValueError(f"iou_thresh must lie in (0, 1], got {iou_thresh}")
        return []
    boxes = np.array([c.box.as_tuple() for c in candidates], dtype=np.float64)
    scores = np.array([c.confidence for c in candidates], dtype=np.float64)
    cls = np.array([c.class_id for c in candidates]) if per_class else None
    return [candidates[i] for i in nms_indices(boxes, scores, iou_thresh, cls)]


def nms_oracle(candidates: Sequence[ScoredBox], iou_thresh: float, per_class: bool = False) -> list[ScoredBox]:
    """Literal greedy NMS: repeatedly take the best remaining box, drop its overlaps."""
    remaining = list(range(len(candidates)))
    kept = []
    while remaining:
        best = remaining[0]
        for idx in remaining[1:]:
            if candidates[idx].confidence > candidates[best].confidence:
                best = idx
        kept.append(candidates[best])
        survivors = []
        for idx in remaining:
            if idx == best:
                continue
            same_class = candidates[idx].class_id == candidates[best].class_id
            if (same_class or not per_class) and iou(candidates[best].box, candidates[idx].box) > iou_thresh:
                continue
            survivors.append(idx)
        remaining = survivors
    return kept
