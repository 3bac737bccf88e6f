"""On-disk formats: frame predictions, detections, ground truth, weights, scenes.

Frame, detection and ground-truth files are JSON lines with a fixed key
order and float32 values rendered in their shortest round-tripping decimal
form, so parsing and re-serialising a canonical file is byte-identical.
Feature rows travel as base64 of little-endian float32.
"""

from __future__ import annotations

import base64
import json
import struct
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .fam import FamWeights
from .fsm import FramePrediction, SelectedSet
from .synthgen import GroundTruth, ObjectTrack, SceneSpec

WEIGHTS_MAGIC = b"VFSA"
WEIGHTS_VERSION = 1


class InputError(ValueError):
    """Malformed or inconsistent input file."""


def fmt_float(x) -> str:
    return str(np.float32(x))


def _floats(values) -> str:
    return "[" + ",".join(fmt_float(v) for v in values) + "]"


def encode_row(row) -> str:
    return base64.b64encode(np.asarray(row, dtype="<f4").tobytes()).decode("ascii")


def decode_row(text: str, d: int | None = None) -> np.ndarray:
    raw = base64.b64decode(text.encode("ascii"), validate=True)
    if len(raw) % 4:
        raise ValueError(f"feature payload of {len(raw)} bytes is not a whole number of float32")
    row = np.frombuffer(raw, dtype="<f4").astype(np.float32)
    if d is not None and row.size != d:
        raise ValueError(f"feature row has {row.size} values, expected {d}")
    return row


# -- frame predictions ---------------------------------------------------


def frame_to_line(frame: FramePrediction) -> str:
    cands = []
    for i in range(len(frame)):
        cands.append(
            '{"box":%s,"cls":%s,"obj":%s,"iou":%s,"feat_cls":"%s","feat_reg":"%s"}'
            % (
                _floats(frame.boxes[i]),
                _floats(frame.class_scores[i]),
                fmt_float(frame.objectness[i]),
                fmt_float(frame.iou_scores[i]),
                encode_row(frame.feat_cls[i]),
                encode_row(frame.feat_reg[i]),
            )
        )
    return '{"frame_id":%d,"candidates":[%s]}' % (frame.frame_id, ",".join(cands))


def frame_from_record(rec: dict) -> FramePrediction:
    fid = rec["frame_id"]
    if not isinstance(fid, int):
        raise ValueError("frame_id must be an integer")
    cands = rec["candidates"]
    n = len(cands)
    if n == 0:
        return FramePrediction(fid, np.zeros((0, 4)), np.zeros((0, 0)), [], [], np.zeros((0, 0)), np.zeros((0, 0)))
    d = None
    boxes, cls, obj, iou, fc, fr = [], [], [], [], [], []
    for j, c in enumerate(cands):
        if len(c["box"]) != 4:
            raise ValueError(f"candidate {j}: box needs 4 coordinates")
        boxes.append(c["box"])
        cls.append(c["cls"])
        obj.append(c["obj"])
        iou.append(c["iou"])
        row_c = decode_row(c["feat_cls"], d)
        d = row_c.size
        fc.append(row_c)
        fr.append(decode_row(c["feat_reg"], d))
    if len({len(v) for v in cls}) != 1:
        raise ValueError("candidates disagree on the number of classes")
    return FramePrediction(fid, np.array(boxes), np.array(cls), obj, iou, np.stack(fc), np.stack(fr))


def _read_jsonl(path: Path) -> Iterator[tuple[int, dict]]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                rec = json.loads(line)
            except json.JSONDecodeError as exc:
                raise InputError(f"{path}:{lineno}: invalid JSON ({exc.msg})") from None
            if not isinstance(rec, dict):
                raise InputError(f"{path}:{lineno}: expected a JSON object")
            yield lineno, rec


def read_frames(path) -> list[FramePrediction]:
    path = Path(path)
    frames, seen = [], set()
    for lineno, rec in _read_jsonl(path):
        try:
            frame = frame_from_record(rec)
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: malformed frame record ({exc})") from None
        if frame.frame_id in seen:
            raise InputError(f"{path}:{lineno}: duplicate frame_id {frame.frame_id}")
        seen.add(frame.frame_id)
        frames.append(frame)
    return frames


def write_frames(path, frames: Iterable[FramePrediction]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for f in frames:
            fh.write(frame_to_line(f) + "\n")


# -- detections and ground truth -----------------------------------------


def detections_to_line(frame_id: int, boxes, class_ids, scores=None) -> str:
    items = []
    for i in range(len(class_ids)):
        if scores is None:
            items.append('{"box":%s,"class_id":%d}' % (_floats(boxes[i]), int(class_ids[i])))
        else:
            items.append('{"box":%s,"class_id":%d,"score":%s}' % (_floats(boxes[i]), int(class_ids[i]), fmt_float(scores[i])))
    return '{"frame_id":%d,"dets":[%s]}' % (frame_id, ",".join(items))


def write_detections(path, records) -> None:
    """``records``: iterable of (frame_id, boxes, class_ids, scores)."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fid, boxes, cls, scores in records:
            fh.write(detections_to_line(fid, boxes, cls, scores) + "\n")


def _read_dets(path, with_score: bool):
    path = Path(path)
    out = {}
    for lineno, rec in _read_jsonl(path):
        try:
            fid = rec["frame_id"]
            dets = rec["dets"]
            boxes = np.array([d["box"] for d in dets], dtype=np.float32).reshape(-1, 4)
            cls = np.array([d["class_id"] for d in dets], dtype=np.int64)
            scores = np.array([d["score"] for d in dets], dtype=np.float32) if with_score else None
        except (KeyError, TypeError, ValueError) as exc:
            raise InputError(f"{path}:{lineno}: malformed record ({exc})") from None
        if fid in out:
            raise InputError(f"{path}:{lineno}: duplicate frame_id {fid}")
        out[fid] = (boxes, cls, scores)
    return out


def read_detections(path) -> dict[int, tuple[np.ndarray, np.ndarray, np.ndarray]]:
    return _read_dets(path, True)


def write_ground_truth(path, gt: GroundTruth) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for fid in sorted(gt.boxes):
            fh.write(detections_to_line(fid, gt.boxes[fid], gt.class_ids[fid]) + "\n")


def read_ground_truth(path) -> GroundTruth:
    recs = _read_dets(path, False)
    return GroundTruth({k: v[0] for k, v in recs.items()}, {k: v[1] for k, v in recs.items()})


def write_selections(path, selections: Iterable[SelectedSet]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for s in selections:
            idx = ",".join(str(int(i)) for i in s.indices)
            fh.write('{"frame_id":%d,"pipeline":"%s","indices":[%s]}\n' % (s.frame_id, s.pipeline_tag, idx))


# -- weights ---------------------------------------------------------------


def write_weights(path, weights: FamWeights) -> None:
    chunks = [WEIGHTS_MAGIC, struct.pack("<I", WEIGHTS_VERSION)]
    for name, tensor in weights.tensors().items():
        raw = name.encode("utf-8")
        t = np.ascontiguousarray(tensor, dtype="<f4")
        chunks.append(struct.pack("<I", len(raw)) + raw)
        chunks.append(struct.pack("<I", t.ndim) + struct.pack(f"<{t.ndim}I", *t.shape))
        chunks.append(t.tobytes())
    Path(path).write_bytes(b"".join(chunks))


def read_weight_tensors(path) -> dict[str, np.ndarray]:
    data = Path(path).read_bytes()
    if data[:4] != WEIGHTS_MAGIC:
        raise InputError(f"{path}: not a VFSA weights file")
    if len(data) < 8:
        raise InputError(f"{path}: truncated header")
    (version,) = struct.unpack_from("<I", data, 4)
    if version != WEIGHTS_VERSION:
        raise InputError(f"{path}: unsupported weights version {version}")
    pos = 8
    tensors: dict[str, np.ndarray] = {}

    def take(nbytes: int) -> bytes:
        nonlocal pos
        if pos + nbytes > len(data):
            raise InputError(f"{path}: truncated at byte {pos}")
        chunk = data[pos:pos + nbytes]
        pos += nbytes
        return chunk

    while pos < len(data):
        (name_len,) = struct.unpack("<I", take(4))
        name = take(name_len).decode("utf-8")
        (rank,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{rank}I", take(4 * rank))
        count = int(np.prod(dims, dtype=np.int64))
        if name in tensors:
            raise InputError(f"{path}: duplicate tensor {name}")
        tensors[name] = np.frombuffer(take(4 * count), dtype="<f4").astype(np.float32).reshape(dims)
    return tensors


def read_weights(path) -> FamWeights:
    return FamWeights.from_tensors(read_weight_tensors(path))


# -- scene specs -----------------------------------------------------------


def scene_from_dict(raw: dict) -> SceneSpec:
    objs = tuple(
        ObjectTrack(int(o["class_id"]), tuple(float(v) for v in o["box"]), tuple(float(v) for v in o.get("velocity", (0.0, 0.0))))
        for o in raw.get("objects", [])
    )
    kwargs = {k: raw[k] for k in ("frames", "noise_sigma", "seed", "classes", "d", "feature_scale") if k in raw}
    if "image_size" in raw:
        kwargs["image_size"] = tuple(int(v) for v in raw["image_size"])
    if "strides" in raw:
        kwargs["strides"] = tuple(int(v) for v in raw["strides"])
    if "degrade_frames" in raw:
        kwargs["degrade_frames"] = frozenset(int(v) for v in raw["degrade_frames"])
    unknown = set(raw) - {"frames", "noise_sigma", "seed", "classes", "d", "feature_scale", "image_size", "strides", "degrade_frames", "objects"}
    if unknown:
        raise ValueError(f"unknown scene keys: {', '.join(sorted(unknown))}")
    return SceneSpec(objects=objs, **kwargs)


def read_scene(path) -> SceneSpec:
    try:
        raw = json.loads(Path(path).read_text(encoding="utf-8"))
        spec = scene_from_dict(raw)
        spec.validate()
    except (json.JSONDecodeError, KeyError, TypeError, ValueError) as exc:
        raise InputError(f"{path}: invalid scene spec ({exc})") from None
    return spec
