"""Feature selection: condense a frame's dense candidates to a foreground subset."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .geometry import Box, iou_matrix, nms_indices

TOPK_K = 750
TOPK_N = 30
SELECT_NMS_IOU = 0.75
CONF_THRESH = 0.001
THRESH_CAP = 100


def _rows(a, n: int) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    if n == 0:
        return a.reshape(0, a.shape[-1] if a.ndim == 2 else 0)
    return a.reshape(n, -1)


@dataclass(frozen=True)
class Candidate:
    box: Box
    class_scores: np.ndarray
    objectness: float
    iou_score: float
    feat_cls: np.ndarray
    feat_reg: np.ndarray

    @property
    def confidence(self) -> float:
        return float(np.float32(self.objectness) * np.float32(np.max(self.class_scores)))


@dataclass
class FramePrediction:
    """Dense predictions for one frame, stored column-wise.

    Row ``i`` of every array describes candidate ``i``. ``confidence`` is
    objectness times the best class probability, computed once in float32.
    """

    frame_id: int
    boxes: np.ndarray
    class_scores: np.ndarray
    objectness: np.ndarray
    iou_scores: np.ndarray
    feat_cls: np.ndarray
    feat_reg: np.ndarray
    confidence: np.ndarray = field(init=False, repr=False)

    def __post_init__(self) -> None:
        self.boxes = np.asarray(self.boxes, dtype=np.float32).reshape(-1, 4)
        n = self.boxes.shape[0]
        self.class_scores = _rows(self.class_scores, n)
        self.objectness = np.asarray(self.objectness, dtype=np.float32).reshape(n)
        self.iou_scores = np.asarray(self.iou_scores, dtype=np.float32).reshape(n)
        self.feat_cls = _rows(self.feat_cls, n)
        self.feat_reg = _rows(self.feat_reg, n)
        if self.feat_cls.shape != self.feat_reg.shape:
            raise ValueError(f"frame {self.frame_id}: feat_cls {self.feat_cls.shape} and feat_reg {self.feat_reg.shape} differ")
        for name in ("class_scores", "objectness", "iou_scores"):
            v = getattr(self, name)
            if v.size and (np.any(v < 0) or np.any(v > 1)):
                raise ValueError(f"frame {self.frame_id}: {name} outside [0, 1]")
        if n and not np.all((self.boxes[:, 2] > self.boxes[:, 0]) & (self.boxes[:, 3] > self.boxes[:, 1])):
            raise ValueError(f"frame {self.frame_id}: boxes must have positive area")
        if n and self.class_scores.shape[1] == 0:
            raise ValueError(f"frame {self.frame_id}: empty class score vectors")
        if n:
            self.confidence = self.objectness * self.class_scores.max(axis=1)
        else:
            self.confidence = np.zeros(0, dtype=np.float32)

    def __len__(self) -> int:
        return self.boxes.shape[0]

    @property
    def num_classes(self) -> int:
        return self.class_scores.shape[1]

    @property
    def feat_dim(self) -> int:
        return self.feat_cls.shape[1]

    def candidate(self, i: int) -> Candidate:
        return Candidate(
            box=Box(*map(float, self.boxes[i])),
            class_scores=self.class_scores[i],
            objectness=float(self.objectness[i]),
            iou_score=float(self.iou_scores[i]),
            feat_cls=self.feat_cls[i],
            feat_reg=self.feat_reg[i],
        )

    def subset(self, indices) -> "FramePrediction":
        idx = np.asarray(indices, dtype=np.int64)
        return FramePrediction(
            self.frame_id,
            self.boxes[idx],
            self.class_scores[idx],
            self.objectness[idx],
            self.iou_scores[idx],
            self.feat_cls[idx],
            self.feat_reg[idx],
        )


@dataclass
class SelectedSet:
    frame_id: int
    indices: np.ndarray
    selected: FramePrediction
    pipeline_tag: str

    def __len__(self) -> int:
        return len(self.indices)

    @property
    def boxes(self) -> np.ndarray:
        return self.selected.boxes


def _empty(frame: FramePrediction, tag: str) -> SelectedSet:
    idx = np.zeros(0, dtype=np.int64)
    return SelectedSet(frame.frame_id, idx, frame.subset(idx), tag)


def select_topk_nms(
    frame: FramePrediction,
    k: int = TOPK_K,
    n: int = TOPK_N,
    nms_iou: float = SELECT_NMS_IOU,
) -> SelectedSet:
    if not k >= n >= 1:
        raise ValueError(f"need k >= n >= 1, got k={k}, n={n}")
    if len(frame) == 0:
        return _empty(frame, "topk_nms")
    conf = frame.confidence
    order = np.lexsort((np.arange(len(frame)), -conf.astype(np.float64)))[:k]
    kept = nms_indices(frame.boxes[order], conf[order], nms_iou)[:n]
    idx = order[kept]
    return SelectedSet(frame.frame_id, idx, frame.subset(idx), "topk_nms")


def select_thresh(frame: FramePrediction, conf_thresh: float = CONF_THRESH, cap: int | None = None) -> SelectedSet:
    """Keep candidates with confidence strictly above ``conf_thresh``.

    ``cap`` bounds the per-frame count by retaining the highest-confidence
    survivors; the result is always in original candidate order.
    """
    if not 0.0 <= conf_thresh < 1.0:
        raise ValueError(f"conf_thresh must lie in [0, 1), got {conf_thresh}")
    idx = np.flatnonzero(frame.confidence > conf_thresh)
    if cap is not None and idx.size > cap:
        conf = frame.confidence[idx].astype(np.float64)
        top = np.lexsort((idx, -conf))[:cap]
        idx = np.sort(idx[top])
    return SelectedSet(frame.frame_id, idx, frame.subset(idx), "thresh")


def _boxes_of(entry) -> np.ndarray:
    if isinstance(entry, SelectedSet):
        return entry.boxes
    return np.asarray(entry, dtype=np.float64).reshape(-1, 4)


def class_agnostic_recall(selections, ground_truth: Mapping[int, Sequence], iou_thresh: float = 0.5) -> float:
    """Fraction of GT boxes covered by at least one selected box.

    ``selections`` is a sequence of :class:`SelectedSet` or a mapping from
    frame id to an (N, 4) box array; ``ground_truth`` maps frame id to boxes.
    """
    if isinstance(selections, Mapping):
        by_frame = {int(k): _boxes_of(v) for k, v in selections.items()}
    else:
        by_frame = {int(s.frame_id): _boxes_of(s) for s in selections}
    total = 0
    matched = 0
    for fid, gts in ground_truth.items():
        gt = _boxes_of(gts)
        if gt.shape[0] == 0:
            continue
        total += gt.shape[0]
        sel = by_frame.get(int(fid))
        if sel is None or sel.shape[0] == 0:
            continue
        best = iou_matrix(gt, sel).max(axis=1)
        matched += int(np.count_nonzero(best >= iou_thresh))
    if total == 0:
        raise ValueError("recall is undefined without ground-truth boxes")
    return matched / total


def mean_selected_per_frame(selections: Sequence[SelectedSet]) -> float:
    if len(selections) == 0:
        raise ValueError("need at least one frame")
    return float(np.mean([len(s) for s in selections]))
