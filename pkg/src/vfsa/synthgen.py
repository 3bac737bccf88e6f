"""Seeded synthetic videos standing in for a one-stage detector's dense output.

Every grid cell of every stride emits one candidate. Cells whose centre lies
inside an object box predict that object (box, class, scores, features);
the rest predict background with confidences below 5e-4. All noise is
drawn as unit variates in a fixed order and only then scaled by the
corruption level, so a fixed seed gives perturbations that grow linearly
with ``noise_sigma``.

Feature prototypes are axis vectors: class ``k`` uses dimension ``k`` in the
classification features and ``classes + 1 + k`` in the regression
features; dimensions ``classes`` and ``2 * classes + 1`` are background.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .fam import AggregationBatch
from .fsm import FramePrediction

BG_CONF_MAX = 5e-4
DEGRADE_FACTOR = 5.0
BOX_JITTER = 0.1
SCORE_DROP = 0.5
WRONG_CLASS_LEAK = 0.2


@dataclass(frozen=True)
class ObjectTrack:
    class_id: int
    box: tuple[float, float, float, float]
    velocity: tuple[float, float] = (0.0, 0.0)

    def box_at(self, t: int) -> np.ndarray:
        vx, vy = self.velocity
        x1, y1, x2, y2 = self.box
        return np.array([x1 + vx * t, y1 + vy * t, x2 + vx * t, y2 + vy * t], dtype=np.float32)


@dataclass(frozen=True)
class SceneSpec:
    frames: int
    image_size: tuple[int, int] = (640, 640)
    objects: tuple[ObjectTrack, ...] = ()
    strides: tuple[int, ...] = (8, 16, 32)
    noise_sigma: float = 0.0
    degrade_frames: frozenset[int] = field(default_factory=frozenset)
    seed: int = 0
    classes: int = 30
    d: int = 64
    feature_scale: float = 1.0

    def validate(self) -> None:
        w, h = self.image_size
        if self.frames < 0:
            raise ValueError("frames must be >= 0")
        if self.noise_sigma < 0:
            raise ValueError("noise_sigma must be >= 0")
        if not self.strides:
            raise ValueError("need at least one stride")
        for s in self.strides:
            if s <= 0 or w % s or h % s:
                raise ValueError(f"stride {s} does not divide image size {self.image_size}")
        if self.d < 2 * (self.classes + 1):
            raise ValueError(f"d={self.d} too small for {self.classes} classes (need >= {2 * (self.classes + 1)})")
        bad = [f for f in self.degrade_frames if not 0 <= f < self.frames]
        if bad:
            raise ValueError(f"degrade_frames outside the video: {sorted(bad)}")
        min_side = min(self.strides)
        for i, obj in enumerate(self.objects):
            if not 0 <= obj.class_id < self.classes:
                raise ValueError(f"object {i}: class_id {obj.class_id} outside [0, {self.classes})")
            x1, y1, x2, y2 = obj.box
            if x2 - x1 < min_side or y2 - y1 < min_side:
                raise ValueError(f"object {i}: sides must be >= the smallest stride {min_side}")
            for t in range(self.frames):
                b = obj.box_at(t)
                if b[0] < 0 or b[1] < 0 or b[2] > w or b[3] > h:
                    raise ValueError(f"object {i} leaves the image at frame {t}")


@dataclass
class GroundTruth:
    boxes: dict[int, np.ndarray]
    class_ids: dict[int, np.ndarray]

    def frame(self, fid: int) -> tuple[np.ndarray, np.ndarray]:
        return self.boxes[fid], self.class_ids[fid]


def grid_centers(image_size: tuple[int, int], strides) -> tuple[np.ndarray, np.ndarray]:
    """Cell centres (N, 2) and per-cell stride (N,), stride-major, row-major."""
    w, h = image_size
    centers, cell_stride = [], []
    for s in strides:
        ys, xs = np.meshgrid(np.arange(h // s), np.arange(w // s), indexing="ij")
        c = np.stack([(xs.ravel() + 0.5) * s, (ys.ravel() + 0.5) * s], axis=1)
        centers.append(c)
        cell_stride.append(np.full(c.shape[0], s, dtype=np.float64))
    return np.concatenate(centers), np.concatenate(cell_stride)


def candidate_count(image_size: tuple[int, int], strides) -> int:
    w, h = image_size
    return sum((w // s) * (h // s) for s in strides)


def _assign(centers: np.ndarray, boxes: np.ndarray) -> np.ndarray:
    """Index of the smallest box containing each centre, or -1."""
    owner = np.full(centers.shape[0], -1, dtype=np.int64)
    if boxes.shape[0] == 0:
        return owner
    inside = (
        (centers[:, None, 0] >= boxes[None, :, 0])
        & (centers[:, None, 0] < boxes[None, :, 2])
        & (centers[:, None, 1] >= boxes[None, :, 1])
        & (centers[:, None, 1] < boxes[None, :, 3])
    )
    area = (boxes[:, 2] - boxes[:, 0]) * (boxes[:, 3] - boxes[:, 1])
    cost = np.where(inside, area[None, :], np.inf)
    best = cost.argmin(axis=1)
    hit = np.isfinite(cost[np.arange(len(best)), best])
    owner[hit] = best[hit]
    return owner


def _frame(spec: SceneSpec, t: int, centers: np.ndarray, cell_stride: np.ndarray):
    n = centers.shape[0]
    C, d = spec.classes, spec.d
    rng = np.random.default_rng([spec.seed, t])
    z_box = rng.standard_normal((n, 4))
    z_obj = np.abs(rng.standard_normal(n))
    z_true = np.abs(rng.standard_normal(n))
    z_wrong = np.abs(rng.standard_normal((n, C)))
    z_iou = np.abs(rng.standard_normal(n))
    z_fc = rng.standard_normal((n, d))
    z_fr = rng.standard_normal((n, d))
    u_bg = rng.random((n, 3))

    amp = spec.noise_sigma * (DEGRADE_FACTOR if t in spec.degrade_frames else 1.0)
    gt_boxes = np.array([o.box_at(t) for o in spec.objects], dtype=np.float32).reshape(-1, 4)
    gt_cls = np.array([o.class_id for o in spec.objects], dtype=np.int64)
    owner = _assign(centers, gt_boxes.astype(np.float64))
    fg = owner >= 0

    half = cell_stride[:, None]
    boxes = np.concatenate([centers - half, centers + half], axis=1)
    boxes[:, :2] = np.maximum(boxes[:, :2], 0.0)
    objectness = BG_CONF_MAX * u_bg[:, 0]
    iou_scores = 0.05 * u_bg[:, 1]
    class_scores = np.tile(u_bg[:, 2:3], (1, C))
    feat_cls = np.zeros((n, d))
    feat_reg = np.zeros((n, d))
    feat_cls[:, C] = spec.feature_scale
    feat_reg[:, 2 * C + 1] = spec.feature_scale

    if np.any(fg):
        own = owner[fg]
        gb = gt_boxes[own].astype(np.float64)
        size = np.stack([gb[:, 2] - gb[:, 0], gb[:, 3] - gb[:, 1]], axis=1)
        jitter = BOX_JITTER * amp * z_box[fg] * np.tile(size, (1, 2))
        fb = gb + jitter
        fb[:, 2] = np.maximum(fb[:, 2], fb[:, 0] + 1.0)
        fb[:, 3] = np.maximum(fb[:, 3], fb[:, 1] + 1.0)
        boxes[fg] = fb if amp > 0 else gb
        objectness[fg] = np.clip(1.0 - SCORE_DROP * amp * z_obj[fg], 0.0, 1.0)
        iou_scores[fg] = np.clip(1.0 - SCORE_DROP * amp * z_iou[fg], 0.0, 1.0)
        cs = np.clip(WRONG_CLASS_LEAK * amp * z_wrong[fg], 0.0, 1.0)
        cs[np.arange(own.size), gt_cls[own]] = np.clip(1.0 - SCORE_DROP * amp * z_true[fg], 0.0, 1.0)
        class_scores[fg] = cs
        fc = np.zeros((own.size, d))
        fr = np.zeros((own.size, d))
        fc[np.arange(own.size), gt_cls[own]] = spec.feature_scale
        fr[np.arange(own.size), C + 1 + gt_cls[own]] = spec.feature_scale
        feat_cls[fg] = fc
        feat_reg[fg] = fr

    feat_cls += amp * z_fc
    feat_reg += amp * z_fr
    pred = FramePrediction(t, boxes, class_scores, objectness, iou_scores, feat_cls, feat_reg)
    return pred, gt_boxes, gt_cls


def generate(spec: SceneSpec) -> tuple[list[FramePrediction], GroundTruth]:
    spec.validate()
    centers, cell_stride = grid_centers(spec.image_size, spec.strides)
    frames, gt_boxes, gt_cls = [], {}, {}
    for t in range(spec.frames):
        pred, b, c = _frame(spec, t, centers, cell_stride)
        frames.append(pred)
        gt_boxes[t], gt_cls[t] = b, c
    return frames, GroundTruth(gt_boxes, gt_cls)


@dataclass
class HomogeneityFixture:
    batch: AggregationBatch
    key_row: int
    distractor_row: int
    correct_rows: tuple[int, ...]
    expected_cosine: str
    expected_affinity: str
    expected_qk: str

    def kind(self, row: int) -> str:
        if row == self.distractor_row:
            return "distractor"
        if row in self.correct_rows:
            return "correct"
        return "key"


def homogeneity_fixture(
    seed: int = 0,
    sigma: float = 1.0,
    distractor_conf: float | None = None,
    d: int = 8,
    scale: float = 2.0,
    noise: float = 0.05,
) -> HomogeneityFixture:
    """Two frames, six proposals: a degraded key, a look-alike low-confidence
    distractor and four clean high-confidence references of the true class.

    Rows: 0 key, 1 distractor, 2 correct (frame 0); 3-5 correct (frame 1).
    ``sigma`` in [0, 1] moves the key from a clean correct-class feature
    (0) to a noisy copy of the distractor (1).
    """
    if not 0.0 <= sigma <= 1.0:
        raise ValueError("sigma must lie in [0, 1]")
    rng = np.random.default_rng(seed)
    e_true = np.zeros(d)
    e_true[0] = 1.0
    distractor_dir = np.zeros(d)
    distractor_dir[0], distractor_dir[1] = 0.6, 0.8
    key_dir = (1.0 - sigma) * e_true + sigma * distractor_dir
    key_dir /= np.linalg.norm(key_dir)
    eps = noise * sigma

    key = scale * key_dir + eps * rng.standard_normal(d)
    distractor = scale * distractor_dir + eps * rng.standard_normal(d)
    correct = scale * e_true + eps * rng.standard_normal((4, d))
    feats = np.vstack([key, distractor, correct]).astype(np.float32)

    c_key = 0.3
    c_dis = rng.uniform(0.05, 0.2) if distractor_conf is None else distractor_conf
    c_cor = rng.uniform(0.8, 0.95, size=4)
    conf = np.array([c_key, c_dis, *c_cor], dtype=np.float32)
    batch = AggregationBatch(feats, feats, conf, conf, [[0, 0], [0, 1], [0, 2], [1, 0], [1, 1], [1, 2]])

    # Noise-free closed form of the key's logits against each reference kind.
    key0 = scale * key_dir
    dot_dis = float(key0 @ (scale * distractor_dir))
    dot_cor = float(key0 @ (scale * e_true))
    cos_dis = dot_dis / (np.linalg.norm(key0) * scale)
    cos_cor = dot_cor / (np.linalg.norm(key0) * scale)
    expected_cosine = "distractor" if cos_dis > cos_cor else "correct"
    expected_qk = "distractor" if dot_dis > dot_cor else "correct"
    expected_affinity = "distractor" if c_dis * dot_dis > c_cor.max() * dot_cor else "correct"
    return HomogeneityFixture(batch, 0, 1, (2, 3, 4, 5), expected_cosine, expected_affinity, expected_qk)


@dataclass
class ReferenceFixture:
    batch: AggregationBatch
    key_only: AggregationBatch
    true_class: int


def reference_fixture(seed: int = 0, frames: int = 8, classes: int = 4, scale: float = 2.0, noise: float = 0.05) -> ReferenceFixture:
    """A degraded key in frame 0 plus one clean high-confidence reference of
    the true class in each of ``frames - 1`` further frames; one-hot class
    features with ``d == classes``."""
    if classes < 2 or frames < 2:
        raise ValueError("need at least 2 classes and 2 frames")
    rng = np.random.default_rng(seed)
    true_cls = int(rng.integers(classes))
    wrong = int((true_cls + 1 + rng.integers(classes - 1)) % classes)
    key = np.zeros(classes)
    key[true_cls], key[wrong] = 0.3, 0.7
    key = scale * key + noise * rng.standard_normal(classes)
    refs = np.zeros((frames - 1, classes))
    refs[:, true_cls] = scale
    refs += noise * rng.standard_normal(refs.shape)
    feats = np.vstack([key, refs]).astype(np.float32)
    conf = np.concatenate([[0.2], rng.uniform(0.8, 0.95, size=frames - 1)]).astype(np.float32)
    offsets = [[t, 0] for t in range(frames)]
    batch = AggregationBatch(feats, feats, conf, conf, offsets)
    key_only = AggregationBatch(feats[:1], feats[:1], conf[:1], conf[:1], offsets[:1])
    return ReferenceFixture(batch, key_only, true_cls)
