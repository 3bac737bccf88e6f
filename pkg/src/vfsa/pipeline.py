"""End-to-end refinement: sample, select, aggregate, decode, suppress."""

from __future__ import annotations

import dataclasses
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import fsm
from . import tensorcore as tc
from .fam import AggregationBatch, FamConfig, FamWeights, fam_forward
from .geometry import nms_indices
from .sampling import SamplerConfig, sample


class ConfigError(ValueError):
    """Invalid configuration value or config file."""


@dataclass
class PipelineConfig:
    fsm_pipeline: str = "thresh"
    topk_k: int = fsm.TOPK_K
    topk_n: int = fsm.TOPK_N
    select_nms_iou: float = fsm.SELECT_NMS_IOU
    conf_thresh: float = fsm.CONF_THRESH
    thresh_cap: int = fsm.THRESH_CAP
    d: int = 256
    heads: int = 4
    mode: str = "affinity"
    tau: float = 0.75
    classes: int = 30
    sampler: str = "global"
    frames: int = 31
    seed: int = 0
    final_nms_iou: float = 0.5
    final_conf: float = 0.001
    weights_path: str = ""
    deterministic: bool = True
    skip_fam: bool = False
    unit_confidence: bool = False

    def validate(self) -> None:
        if self.fsm_pipeline not in ("thresh", "topk_nms"):
            raise ConfigError(f"fsm_pipeline must be 'thresh' or 'topk_nms', got {self.fsm_pipeline!r}")
        for name in ("select_nms_iou", "final_nms_iou"):
            v = getattr(self, name)
            if not 0.0 < v <= 1.0:
                raise ConfigError(f"{name} must lie in (0, 1], got {v}")
        for name in ("conf_thresh", "final_conf"):
            v = getattr(self, name)
            if not 0.0 <= v < 1.0:
                raise ConfigError(f"{name} must lie in [0, 1), got {v}")
        if not self.topk_k >= self.topk_n >= 1:
            raise ConfigError(f"need topk_k >= topk_n >= 1, got {self.topk_k}, {self.topk_n}")
        if self.thresh_cap < 0:
            raise ConfigError("thresh_cap must be >= 0 (0 disables the cap)")
        try:
            self.fam_config()
            self.sampler_config()
        except ValueError as exc:
            raise ConfigError(str(exc)) from None

    def fam_config(self) -> FamConfig:
        return FamConfig(d=self.d, heads=self.heads, mode=self.mode, tau=self.tau, classes=self.classes)

    def sampler_config(self) -> SamplerConfig:
        return SamplerConfig(strategy=self.sampler, count=self.frames, seed=self.seed)


def _coerce(ftype, raw: str):
    if ftype in (bool, "bool"):
        low = raw.strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if ftype in (int, "int"):
        return int(raw)
    if ftype in (float, "float"):
        return float(raw)
    return raw.strip()


def apply_overrides(cfg: PipelineConfig, values: dict[str, str]) -> PipelineConfig:
    fields = {f.name: f.type for f in dataclasses.fields(PipelineConfig)}
    updates = {}
    for key, raw in values.items():
        if key not in fields:
            raise ConfigError(f"unknown config key {key!r}")
        try:
            updates[key] = _coerce(fields[key], raw)
        except ValueError as exc:
            raise ConfigError(f"{key}: {exc}") from None
    return dataclasses.replace(cfg, **updates)


def read_config(path, base: PipelineConfig | None = None) -> PipelineConfig:
    """Parse flat ``key = value`` lines; ``#`` starts a comment."""
    values = {}
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc.strerror}") from None
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"{path}:{lineno}: expected key=value")
        key, value = (part.strip() for part in line.split("=", 1))
        values[key] = value
    return apply_overrides(base or PipelineConfig(), values)


def select_frame(frame: fsm.FramePrediction, cfg: PipelineConfig) -> fsm.SelectedSet:
    if cfg.fsm_pipeline == "topk_nms":
        return fsm.select_topk_nms(frame, cfg.topk_k, cfg.topk_n, cfg.select_nms_iou)
    return fsm.select_thresh(frame, cfg.conf_thresh, cfg.thresh_cap or None)


@dataclass
class KeyFrameDetections:
    frame_id: int
    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray = field(repr=False)


def _decode(frame_id: int, boxes, class_ids, scores, cfg: PipelineConfig) -> KeyFrameDetections:
    keep = scores > cfg.final_conf
    boxes, class_ids, scores = boxes[keep], class_ids[keep], scores[keep]
    kept = nms_indices(boxes, scores, cfg.final_nms_iou, class_ids)
    return KeyFrameDetections(frame_id, boxes[kept].astype(np.float32), class_ids[kept], scores[kept].astype(np.float32))


def refine_key_frame(
    key: int,
    frames: Sequence[fsm.FramePrediction],
    selections: Sequence[fsm.SelectedSet],
    weights: FamWeights | None,
    cfg: PipelineConfig,
) -> KeyFrameDetections:
    """Refined detections for ``frames[key]`` using sampled reference frames."""
    key_sel = selections[key]
    fid = frames[key].frame_id
    empty = KeyFrameDetections(fid, np.zeros((0, 4), np.float32), np.zeros(0, np.int64), np.zeros(0, np.float32))
    if len(key_sel) == 0:
        return empty
    if cfg.skip_fam:
        sel = key_sel.selected
        return _decode(fid, sel.boxes, sel.class_scores.argmax(axis=1), sel.confidence, cfg)

    picked = sample(len(frames), key, cfg.sampler_config())
    batch = AggregationBatch.from_selections([selections[i] for i in picked])
    if cfg.unit_confidence:
        batch = batch.with_unit_confidence()
    with tc.kernel_mode(cfg.deterministic):
        refined = fam_forward(batch, weights, cfg.fam_config())
    rows = np.flatnonzero(batch.frame_offsets[:, 0] == fid)
    class_ids, scores = refined.detection_scores()
    boxes = frames[key].boxes[batch.frame_offsets[rows, 1]]
    return _decode(fid, boxes, class_ids[rows], scores[rows], cfg)


def run_refine(
    frames: Sequence[fsm.FramePrediction],
    weights: FamWeights | None,
    cfg: PipelineConfig,
    threads: int | None = None,
) -> list[KeyFrameDetections]:
    """Refine every frame as a key frame; results come back in input order.

    Key frames are processed on up to ``threads`` workers (default from
    ``VFSA_THREADS``; 0 or 1 runs serially).
    """
    cfg.validate()
    if not cfg.skip_fam:
        if weights is None:
            raise ConfigError("refinement needs weights unless skip_fam is set")
        weights.check(cfg.fam_config())
        for f in frames:
            if len(f) and (f.feat_dim != cfg.d or f.num_classes != cfg.classes):
                raise ValueError(
                    f"frame {f.frame_id}: features of width {f.feat_dim} and {f.num_classes} classes "
                    f"do not match d={cfg.d}, classes={cfg.classes}"
                )
    selections = [select_frame(f, cfg) for f in frames]
    workers = tc.thread_limit() if threads is None else threads
    if workers <= 1 or len(frames) <= 1:
        return [refine_key_frame(k, frames, selections, weights, cfg) for k in range(len(frames))]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda k: refine_key_frame(k, frames, selections, weights, cfg), range(len(frames))))
