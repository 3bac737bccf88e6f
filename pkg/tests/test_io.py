import json
import struct

import numpy as np
import pytest

from factories import small_scene
from vfsa import io
from vfsa.fam import FamConfig, FamWeights, init_weights
from vfsa.pipeline import ConfigError, PipelineConfig, read_config
from vfsa.synthgen import generate
from vfsa.tensorcore import ShapeError


def test_float_format_round_trips():
    rng = np.random.default_rng(0)
    for x in rng.standard_normal(1000).astype(np.float32):
        assert np.float32(float(io.fmt_float(x))) == x


def test_frames_byte_round_trip(tmp_path):
    frames, _ = generate(small_scene(0.3, frames=3, degrade=(1,)))
    p1, p2 = tmp_path / "a.jsonl", tmp_path / "b.jsonl"
    io.write_frames(p1, frames)
    back = io.read_frames(p1)
    io.write_frames(p2, back)
    assert p1.read_bytes() == p2.read_bytes()
    for f, g in zip(frames, back):
        assert np.array_equal(f.feat_cls, g.feat_cls) and np.array_equal(f.boxes, g.boxes)
        assert np.array_equal(f.confidence, g.confidence)


def test_frame_line_key_order():
    frames, _ = generate(small_scene(0.0, frames=1))
    rec = json.loads(io.frame_to_line(frames[0]))
    assert list(rec) == ["frame_id", "candidates"]
    assert list(rec["candidates"][0]) == ["box", "cls", "obj", "iou", "feat_cls", "feat_reg"]


def test_empty_frame_round_trip(tmp_path):
    p = tmp_path / "f.jsonl"
    p.write_text('{"frame_id":4,"candidates":[]}\n')
    (f,) = io.read_frames(p)
    assert len(f) == 0 and f.frame_id == 4
    io.write_frames(tmp_path / "g.jsonl", [f])
    assert (tmp_path / "g.jsonl").read_text() == p.read_text()


@pytest.mark.parametrize(
    "bad, lineno",
    [
        ('{"frame_id":0,"candidates":[]}\n{oops\n', 2),
        ('{"frame_id":0,"candidates":[]}\n\n{"frame_id":1}\n', 3),
        ('[1,2]\n', 1),
        ('{"frame_id":0,"candidates":[]}\n{"frame_id":0,"candidates":[]}\n', 2),
        ('{"frame_id":0,"candidates":[{"box":[0,0,1],"cls":[1],"obj":1,"iou":1,"feat_cls":"","feat_reg":""}]}\n', 1),
    ],
)
def test_malformed_frames_report_line(tmp_path, bad, lineno):
    p = tmp_path / "bad.jsonl"
    p.write_text(bad)
    with pytest.raises(io.InputError, match=f"bad.jsonl:{lineno}:"):
        io.read_frames(p)


def test_feature_width_mismatch(tmp_path):
    row = io.encode_row([1.0, 2.0])
    wide = io.encode_row([1.0, 2.0, 3.0])
    cand = '{"box":[0,0,1,1],"cls":[1],"obj":1,"iou":1,"feat_cls":"%s","feat_reg":"%s"}'
    p = tmp_path / "f.jsonl"
    p.write_text('{"frame_id":0,"candidates":[%s,%s]}\n' % (cand % (row, row), cand % (wide, wide)))
    with pytest.raises(io.InputError, match="expected 2"):
        io.read_frames(p)


def test_detections_and_gt_round_trip(tmp_path):
    _, gt = generate(small_scene(0.0, frames=2))
    p = tmp_path / "gt.jsonl"
    io.write_ground_truth(p, gt)
    back = io.read_ground_truth(p)
    for k in gt.boxes:
        assert np.array_equal(back.boxes[k], gt.boxes[k]) and np.array_equal(back.class_ids[k], gt.class_ids[k])
    d = tmp_path / "d.jsonl"
    boxes = np.array([[1.5, 2.25, 9.0, 10.0]], np.float32)
    io.write_detections(d, [(7, boxes, np.array([2]), np.array([0.3], np.float32)), (8, np.zeros((0, 4)), [], [])])
    assert d.read_text() == (
        '{"frame_id":7,"dets":[{"box":[1.5,2.25,9.0,10.0],"class_id":2,"score":0.3}]}\n'
        '{"frame_id":8,"dets":[]}\n'
    )
    dets = io.read_detections(d)
    assert np.array_equal(dets[7][0], boxes) and dets[8][0].shape == (0, 4)


def test_weights_bit_exact(tmp_path):
    w = init_weights(7, FamConfig(d=8, heads=2, classes=3))
    p, q = tmp_path / "w.bin", tmp_path / "w2.bin"
    io.write_weights(p, w)
    back = io.read_weights(p)
    for name, t in w.tensors().items():
        assert back.tensors()[name].tobytes() == t.tobytes()
    io.write_weights(q, back)
    assert p.read_bytes() == q.read_bytes()


def test_weights_layout(tmp_path):
    w = init_weights(0, FamConfig(d=4, heads=1, classes=2))
    p = tmp_path / "w.bin"
    io.write_weights(p, w)
    data = p.read_bytes()
    assert data[:4] == b"VFSA" and struct.unpack_from("<I", data, 4) == (1,)
    (nlen,) = struct.unpack_from("<I", data, 8)
    name = data[12:12 + nlen].decode()
    rank, r0, r1 = struct.unpack_from("<III", data, 12 + nlen)
    assert name == "cls.w_q" and (rank, r0, r1) == (2, 4, 4)
    first = np.frombuffer(data, "<f4", count=16, offset=24 + nlen).reshape(4, 4)
    assert np.array_equal(first, w.cls.w_q)


def test_weights_errors(tmp_path):
    p = tmp_path / "w.bin"
    p.write_bytes(b"NOPE\x01\x00\x00\x00")
    with pytest.raises(io.InputError, match="not a VFSA"):
        io.read_weights(p)
    io.write_weights(p, init_weights(0, FamConfig(d=4, heads=1, classes=2)))
    p.write_bytes(p.read_bytes()[:-3])
    with pytest.raises(io.InputError, match="truncated"):
        io.read_weights(p)
    t = dict(init_weights(0, FamConfig(d=4, heads=1, classes=2)).tensors())
    del t["head_iou.b"]
    with pytest.raises(ShapeError, match="head_iou.b"):
        FamWeights.from_tensors(t)


def test_scene_file(tmp_path):
    p = tmp_path / "s.json"
    p.write_text(json.dumps({"frames": 2, "image_size": [160, 160], "classes": 3, "d": 8,
                             "objects": [{"class_id": 1, "box": [10, 10, 50, 50], "velocity": [1, 0]}]}))
    spec = io.read_scene(p)
    assert spec.frames == 2 and spec.objects[0].velocity == (1.0, 0.0)
    p.write_text(json.dumps({"frames": 2, "colour": "red"}))
    with pytest.raises(io.InputError, match="colour"):
        io.read_scene(p)


def test_config_file(tmp_path):
    p = tmp_path / "c.cfg"
    p.write_text("# comment\nmode = qk   # trailing\n\ntau=0.5\ndeterministic = false\nframes = 7\n")
    cfg = read_config(p)
    assert (cfg.mode, cfg.tau, cfg.deterministic, cfg.frames) == ("qk", 0.5, False, 7)
    assert read_config(p, PipelineConfig(heads=2)).heads == 2
    for body in ("nonsense\n", "unknown_key = 1\n", "tau = high\n", "deterministic = maybe\n"):
        p.write_text(body)
        with pytest.raises(ConfigError):
            read_config(p)
    with pytest.raises(ConfigError):
        read_config(tmp_path / "missing.cfg")
