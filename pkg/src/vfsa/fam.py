"""Feature aggregation: decoupled cross-frame attention over selected proposals.

Both branches (classification and regression) project their stacked
features to Q, K, V. The two attention maps are averaged and applied to each
branch's V; the result is concatenated with V itself. The classification
path also receives an average over references whose normalized value
features are at least ``tau``-similar to the proposal, before the linear
score heads.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from . import tensorcore as tc
from .tensorcore import ShapeError

MODES = ("cosine", "qk", "affinity")
BRANCHES = ("cls", "reg")


@dataclass(frozen=True)
class FamConfig:
    d: int = 256
    heads: int = 4
    mode: str = "affinity"
    tau: float = 0.75
    classes: int = 30

    def __post_init__(self) -> None:
        if self.d < 1 or self.heads < 1 or self.d % self.heads:
            raise ValueError(f"d={self.d} must be a positive multiple of heads={self.heads}")
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if not 0.0 <= self.tau <= 1.0:
            raise ValueError(f"tau must lie in [0, 1], got {self.tau}")
        if self.classes < 1:
            raise ValueError("classes must be >= 1")


@dataclass(frozen=True)
class BranchWeights:
    w_q: np.ndarray
    b_q: np.ndarray
    w_k: np.ndarray
    b_k: np.ndarray
    w_v: np.ndarray
    b_v: np.ndarray


@dataclass(frozen=True)
class FamWeights:
    cls: BranchWeights
    reg: BranchWeights
    head_cls_w: np.ndarray
    head_cls_b: np.ndarray
    head_iou_w: np.ndarray
    head_iou_b: np.ndarray

    @property
    def d(self) -> int:
        return self.cls.w_q.shape[0]

    @property
    def classes(self) -> int:
        return self.head_cls_w.shape[1]

    def tensors(self) -> dict[str, np.ndarray]:
        """Canonical name -> tensor mapping, in file order."""
        out: dict[str, np.ndarray] = {}
        for name in BRANCHES:
            br = getattr(self, name)
            for field in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v"):
                out[f"{name}.{field}"] = getattr(br, field)
        out["head_cls.w"] = self.head_cls_w
        out["head_cls.b"] = self.head_cls_b
        out["head_iou.w"] = self.head_iou_w
        out["head_iou.b"] = self.head_iou_b
        return out

    @classmethod
    def from_tensors(cls, tensors: dict[str, np.ndarray]) -> "FamWeights":
        missing = [k for k in tensor_shapes(1, 1) if k not in tensors]
        if missing:
            raise ShapeError(f"weights missing tensors: {', '.join(missing)}")
        t = {k: np.asarray(v, dtype=np.float32) for k, v in tensors.items()}
        d = t["cls.w_q"].shape[0] if t["cls.w_q"].ndim == 2 else -1
        classes = t["head_cls.w"].shape[-1] if t["head_cls.w"].ndim == 2 else -1
        expected = tensor_shapes(d, classes)
        for name, shape in expected.items():
            if t[name].shape != shape:
                raise ShapeError(f"tensor {name} has shape {t[name].shape}, expected {shape}")
            if not np.all(np.isfinite(t[name])):
                raise ValueError(f"tensor {name} contains non-finite values")
        branches = {
            b: BranchWeights(*(t[f"{b}.{f}"] for f in ("w_q", "b_q", "w_k", "b_k", "w_v", "b_v")))
            for b in BRANCHES
        }
        return cls(branches["cls"], branches["reg"], t["head_cls.w"], t["head_cls.b"], t["head_iou.w"], t["head_iou.b"])

    def check(self, cfg: FamConfig) -> None:
        expected = tensor_shapes(cfg.d, cfg.classes)
        for name, tensor in self.tensors().items():
            if tensor.shape != expected[name]:
                raise ShapeError(f"tensor {name} has shape {tensor.shape}, config expects {expected[name]}")


def tensor_shapes(d: int, classes: int) -> dict[str, tuple[int, ...]]:
    shapes: dict[str, tuple[int, ...]] = {}
    for b in BRANCHES:
        for p in ("q", "k", "v"):
            shapes[f"{b}.w_{p}"] = (d, d)
            shapes[f"{b}.b_{p}"] = (d,)
    shapes["head_cls.w"] = (3 * d, classes)
    shapes["head_cls.b"] = (classes,)
    shapes["head_iou.w"] = (2 * d, 1)
    shapes["head_iou.b"] = (1,)
    return shapes


def init_weights(seed: int, cfg: FamConfig, std: float = 0.02) -> FamWeights:
    rng = np.random.default_rng(seed)
    tensors = {
        name: rng.normal(0.0, std, size=shape).astype(np.float32)
        for name, shape in tensor_shapes(cfg.d, cfg.classes).items()
    }
    return FamWeights.from_tensors(tensors)


def identity_weights(d: int, classes: int, readout_scale: float = 1.0) -> FamWeights:
    """Identity projections, zero biases, and a class head reading the
    first ``classes`` columns of the attention-average half."""
    if classes > d:
        raise ValueError(f"identity readout needs classes <= d, got {classes} > {d}")
    eye = np.eye(d, dtype=np.float32)
    zero = np.zeros(d, dtype=np.float32)
    branch = BranchWeights(eye, zero, eye, zero, eye, zero)
    head = np.zeros((3 * d, classes), dtype=np.float32)
    head[:classes, :classes] = np.eye(classes, dtype=np.float32) * np.float32(readout_scale)
    return FamWeights(
        branch,
        branch,
        head,
        np.zeros(classes, dtype=np.float32),
        np.zeros((2 * d, 1), dtype=np.float32),
        np.zeros(1, dtype=np.float32),
    )


@dataclass
class AggregationBatch:
    features_cls: np.ndarray
    features_reg: np.ndarray
    conf_cls: np.ndarray
    conf_iou: np.ndarray
    frame_offsets: np.ndarray  # (n, 2): frame id, proposal index within that frame

    def __post_init__(self) -> None:
        self.features_cls = tc.as_matrix(self.features_cls, name="features_cls")
        self.features_reg = tc.as_matrix(self.features_reg, name="features_reg")
        n = self.features_cls.shape[0]
        if self.features_reg.shape != self.features_cls.shape:
            raise ShapeError(f"features_cls {self.features_cls.shape} vs features_reg {self.features_reg.shape}")
        self.conf_cls = np.asarray(self.conf_cls, dtype=np.float32).reshape(-1)
        self.conf_iou = np.asarray(self.conf_iou, dtype=np.float32).reshape(-1)
        self.frame_offsets = np.asarray(self.frame_offsets, dtype=np.int64).reshape(-1, 2)
        for name in ("conf_cls", "conf_iou", "frame_offsets"):
            if getattr(self, name).shape[0] != n:
                raise ShapeError(f"{name} has {getattr(self, name).shape[0]} rows, expected {n}")
        for name in ("conf_cls", "conf_iou"):
            v = getattr(self, name)
            if np.any(v < 0) or np.any(v > 1):
                raise ValueError(f"{name} outside [0, 1]")

    def __len__(self) -> int:
        return self.features_cls.shape[0]

    @classmethod
    def from_selections(cls, selections: Sequence) -> "AggregationBatch":
        """Stack :class:`~vfsa.fsm.SelectedSet` rows; classification
        confidence is objectness x best class score, regression confidence
        is the predicted IoU."""
        selections = [s for s in selections if len(s)]
        if not selections:
            return cls(np.zeros((0, 0)), np.zeros((0, 0)), [], [], np.zeros((0, 2)))
        parts = [s.selected for s in selections]
        offsets = [
            np.stack([np.full(len(s), s.frame_id, dtype=np.int64), np.asarray(s.indices, dtype=np.int64)], axis=1)
            for s in selections
        ]
        return cls(
            np.concatenate([p.feat_cls for p in parts]),
            np.concatenate([p.feat_reg for p in parts]),
            np.concatenate([p.confidence for p in parts]),
            np.concatenate([p.iou_scores for p in parts]),
            np.concatenate(offsets),
        )

    def with_unit_confidence(self) -> "AggregationBatch":
        ones = np.ones(len(self), dtype=np.float32)
        return AggregationBatch(self.features_cls, self.features_reg, ones, ones, self.frame_offsets)


@dataclass
class RefinedScores:
    cls_probs: np.ndarray
    iou_probs: np.ndarray

    def detection_scores(self) -> tuple[np.ndarray, np.ndarray]:
        """Per-row (best class id, best class prob x IoU prob)."""
        class_id = self.cls_probs.argmax(axis=1)
        best = self.cls_probs[np.arange(len(class_id)), class_id]
        return class_id, (best * self.iou_probs).astype(np.float32)


def project_qkv(features, weights: BranchWeights) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    x = tc.as_matrix(features, name="features")
    d = weights.w_q.shape[0]
    if x.shape[1] != d:
        raise ShapeError(f"features have width {x.shape[1]}, projections expect {d}")
    return (
        tc.linear(x, weights.w_q, weights.b_q),
        tc.linear(x, weights.w_k, weights.b_k),
        tc.linear(x, weights.w_v, weights.b_v),
    )


def _safe_unit(m: np.ndarray) -> np.ndarray:
    norms = tc.row_norms(m)
    out = np.zeros(m.shape, dtype=np.float32)
    ok = norms > 0
    if np.any(ok):
        out[ok] = tc.unit_norm_rows(m[ok])
    return out


def attention_weights(Q, K, mode: str = "qk", conf=None, heads: int = 1) -> np.ndarray:
    """Row-stochastic attention maps of shape (heads, n, n).

    Logits are computed per head on ``d / heads`` column slices: scaled dot
    products (``qk``), dot products weighted by the key-side confidence
    before scaling (``affinity``), or plain cosine similarity (``cosine``).
    """
    Q = tc.as_matrix(Q, name="Q")
    K = tc.as_matrix(K, name="K")
    if Q.shape != K.shape:
        raise ShapeError(f"Q {Q.shape} and K {K.shape} differ")
    n, d = Q.shape
    if n == 0:
        raise ShapeError("attention over zero proposals")
    if mode not in MODES:
        raise ValueError(f"unknown mode {mode!r}")
    if d % heads:
        raise ShapeError(f"d={d} not divisible by heads={heads}")
    if mode == "affinity":
        if conf is None:
            raise ValueError("affinity mode needs per-proposal confidences")
        conf = np.asarray(conf, dtype=np.float32).reshape(-1)
        if conf.shape[0] != n:
            raise ShapeError(f"conf has length {conf.shape[0]}, expected {n}")
    dh = d // heads
    scale = np.float32(np.sqrt(dh))
    out = np.empty((heads, n, n), dtype=np.float32)
    for h in range(heads):
        qh = Q[:, h * dh:(h + 1) * dh]
        kh = K[:, h * dh:(h + 1) * dh]
        if mode == "cosine":
            logits = tc.matmul(_safe_unit(qh), _safe_unit(kh).T)
        else:
            qk = tc.matmul(qh, kh.T)
            if mode == "affinity":
                logits = (qk * conf[None, :]) / scale
            else:
                logits = qk / scale
        out[h] = tc.softmax_rows(logits)
    return out


def _as_heads(a: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float32)
    return a[None] if a.ndim == 2 else a


def aggregate(A_c, A_r, V) -> np.ndarray:
    """``concat((A_c + A_r) V / 2, V)`` with per-head column slices of V.

    A 2-D attention map is applied to the full width of V.
    """
    V = tc.as_matrix(V, name="V")
    A_c, A_r = _as_heads(A_c), _as_heads(A_r)
    n, d = V.shape
    if A_c.shape != A_r.shape or A_c.shape[1:] != (n, n):
        raise ShapeError(f"attention maps {A_c.shape}, {A_r.shape} do not fit V {V.shape}")
    heads = A_c.shape[0]
    if d % heads:
        raise ShapeError(f"V width {d} not divisible by {heads} heads")
    dh = d // heads
    mixed = np.empty((n, d), dtype=np.float32)
    for h in range(heads):
        both = A_c[h] + A_r[h]
        mixed[:, h * dh:(h + 1) * dh] = tc.matmul(both, V[:, h * dh:(h + 1) * dh]) / np.float32(2.0)
    return np.concatenate([mixed, V], axis=1)


def _normalized_values(V_c: np.ndarray) -> np.ndarray:
    return _safe_unit(tc.layer_norm_rows(V_c))


def pool_members(V_c, tau: float, keys=None) -> np.ndarray:
    """Boolean (len(keys), n) mask of references pooled for each key row."""
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    normed = _normalized_values(tc.as_matrix(V_c, name="V_c"))
    return _members(normed, tau, keys)


def _members(normed: np.ndarray, tau: float, keys) -> np.ndarray:
    n = normed.shape[0]
    keys = np.arange(n) if keys is None else np.asarray(keys, dtype=np.int64).reshape(-1)
    sim = np.clip(np.array(tc.matmul(normed[keys], normed.T)), -1.0, 1.0)
    sim[np.arange(keys.size), keys] = 1.0
    return sim >= np.float32(tau)


def reference_average_pool(V_c, keys=None, tau: float = 0.75) -> np.ndarray:
    """Mean of the normalized value rows at least ``tau``-similar to each key.

    Rows are layer-normed and then scaled to unit length, so similarity is
    a cosine; a key's own row always qualifies. At ``tau == 1`` only exact
    duplicates join, so the output is the key's normalized row.
    """
    if not 0.0 <= tau <= 1.0:
        raise ValueError(f"tau must lie in [0, 1], got {tau}")
    normed = _normalized_values(tc.as_matrix(V_c, name="V_c"))
    mask = _members(normed, tau, keys)
    counts = mask.sum(axis=1).astype(np.float32)
    total = tc.matmul(mask.astype(np.float32), normed)
    return (total / counts[:, None]).astype(np.float32)


def fam_forward(batch: AggregationBatch, weights: FamWeights, cfg: FamConfig) -> RefinedScores:
    weights.check(cfg)
    if batch.features_cls.shape[1] != cfg.d:
        raise ShapeError(f"batch feature width {batch.features_cls.shape[1]} != d={cfg.d}")
    q_c, k_c, v_c = project_qkv(batch.features_cls, weights.cls)
    q_r, k_r, v_r = project_qkv(batch.features_reg, weights.reg)
    a_c = attention_weights(q_c, k_c, cfg.mode, batch.conf_cls, cfg.heads)
    a_r = attention_weights(q_r, k_r, cfg.mode, batch.conf_iou, cfg.heads)
    agg_c = aggregate(a_c, a_r, v_c)
    agg_r = aggregate(a_c, a_r, v_r)
    pooled = reference_average_pool(v_c, tau=cfg.tau)
    cls_in = np.concatenate([agg_c, pooled], axis=1)
    cls_probs = tc.sigmoid(tc.linear(cls_in, weights.head_cls_w, weights.head_cls_b))
    iou_probs = tc.sigmoid(tc.linear(agg_r, weights.head_iou_w, weights.head_iou_b))[:, 0]
    return RefinedScores(cls_probs, iou_probs)
