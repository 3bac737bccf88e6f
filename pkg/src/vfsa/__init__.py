"""Feature selection and cross-frame aggregation for one-stage video detectors."""

from .fam import AggregationBatch, FamConfig, FamWeights, RefinedScores, fam_forward, init_weights
from .fsm import FramePrediction, SelectedSet, select_thresh, select_topk_nms
from .geometry import Box, ScoredBox, iou, nms
from .pipeline import PipelineConfig, run_refine

__version__ = "0.1.0"

__all__ = [
    "AggregationBatch",
    "Box",
    "FamConfig",
    "FamWeights",
    "FramePrediction",
    "PipelineConfig",
    "RefinedScores",
    "ScoredBox",
    "SelectedSet",
    "fam_forward",
    "init_weights",
    "iou",
    "nms",
    "run_refine",
    "select_thresh",
    "select_topk_nms",
]
