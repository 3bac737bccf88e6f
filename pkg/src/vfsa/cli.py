"""Command-line entry point: ``vfsa synth|select|refine|eval|bench|weights``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
from pathlib import Path

from . import evalbench, fsm, io
from . import tensorcore as tc
from .fam import identity_weights, init_weights
from .pipeline import ConfigError, PipelineConfig, apply_overrides, read_config, run_refine, select_frame
from .synthgen import generate
from .tensorcore import ShapeError

EXIT_OK = 0
EXIT_INPUT = 2
EXIT_CONFIG = 3

log = logging.getLogger("vfsa")

# flag name -> PipelineConfig field
_FLAG_FIELDS = {
    "pipeline": "fsm_pipeline",
    "mode": "mode",
    "tau": "tau",
    "heads": "heads",
    "d": "d",
    "classes": "classes",
    "sampler": "sampler",
    "frames": "frames",
    "weights": "weights_path",
}


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--config", type=Path, default=None, help="flat key=value config file")
    p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                   help="override any config key (repeatable)")
    p.add_argument("--deterministic", dest="deterministic", action="store_true", default=None,
                   help="serial, bit-reproducible kernels (default)")
    p.add_argument("--no-deterministic", dest="deterministic", action="store_false")


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--pipeline", choices=("thresh", "topk_nms"))
    p.add_argument("--mode", choices=("cosine", "qk", "affinity"))
    p.add_argument("--tau", type=str)
    p.add_argument("--heads", type=str)
    p.add_argument("--d", type=str)
    p.add_argument("--classes", type=str)
    p.add_argument("--sampler", choices=("global", "local"))
    p.add_argument("--frames", type=str, help="reference frames per key frame")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vfsa", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic video from a scene spec")
    p.add_argument("scene", type=Path)
    p.add_argument("--frames-out", type=Path, required=True)
    p.add_argument("--gt-out", type=Path, required=True)
    _common(p)

    p = sub.add_parser("select", help="run feature selection and report counts/recall")
    p.add_argument("frames_file", type=Path)
    p.add_argument("--gt", type=Path)
    p.add_argument("--out", type=Path)
    p.add_argument("--iou", type=float, default=0.5, help="recall IoU threshold")
    p.add_argument("--no-cap", action="store_true", help="disable the per-frame Thresh cap")
    _common(p)
    _pipeline_flags(p)

    p = sub.add_parser("refine", help="refine detections with feature aggregation")
    p.add_argument("frames_file", type=Path)
    p.add_argument("--weights", type=str)
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--skip-fam", action="store_true", help="decode selected candidates with base scores")
    p.add_argument("--unit-confidence", action="store_true", help="force all aggregation confidences to 1")
    _common(p)
    _pipeline_flags(p)

    p = sub.add_parser("eval", help="score detections against ground truth")
    p.add_argument("detections", type=Path)
    p.add_argument("gt", type=Path)
    p.add_argument("--iou", type=float, default=0.5)
    _common(p)

    p = sub.add_parser("bench", help="attention cost-scaling benchmark")
    p.add_argument("--sizes", default="512,1024,2048,4096,8192")
    p.add_argument("--d", type=int, default=256)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--heads", type=int, default=1)
    p.add_argument("--parallel", action="store_true", help="let BLAS use all threads")
    p.add_argument("--json-out", type=Path)
    _common(p)

    p = sub.add_parser("weights", help="write a VFSA weights file")
    p.add_argument("--out", type=Path, required=True)
    p.add_argument("--init", choices=("random", "identity"), default="random")
    p.add_argument("--readout-scale", type=float, default=1.0)
    _common(p)
    p.add_argument("--d", type=str)
    p.add_argument("--classes", type=str)
    p.add_argument("--heads", type=str)
    return parser


def resolve_config(args: argparse.Namespace) -> PipelineConfig:
    cfg = PipelineConfig()
    if getattr(args, "config", None) is not None:
        cfg = read_config(args.config, cfg)
    flags = {}
    for flag, name in _FLAG_FIELDS.items():
        value = getattr(args, flag, None)
        if value is not None:
            flags[name] = str(value)
    for item in getattr(args, "overrides", []):
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        k, v = item.split("=", 1)
        flags[k.strip()] = v.strip()
    if getattr(args, "seed", None) is not None:
        flags["seed"] = str(args.seed)
    if getattr(args, "deterministic", None) is not None:
        flags["deterministic"] = str(args.deterministic)
    if getattr(args, "skip_fam", False):
        flags["skip_fam"] = "true"
    if getattr(args, "unit_confidence", False):
        flags["unit_confidence"] = "true"
    if getattr(args, "no_cap", False):
        flags["thresh_cap"] = "0"
    cfg = apply_overrides(cfg, flags)
    cfg.validate()
    return cfg


def cmd_synth(args, cfg: PipelineConfig) -> int:
    spec = io.read_scene(args.scene)
    if args.seed is not None:
        spec = dataclasses.replace(spec, seed=args.seed)
    frames, gt = generate(spec)
    io.write_frames(args.frames_out, frames)
    io.write_ground_truth(args.gt_out, gt)
    log.info("wrote %d frames", len(frames))
    return EXIT_OK


def cmd_select(args, cfg: PipelineConfig) -> int:
    frames = io.read_frames(args.frames_file)
    selections = [select_frame(f, cfg) for f in frames]
    report: dict = {"pipeline": cfg.fsm_pipeline, "frames": len(frames)}
    if selections:
        report["mean_selected_per_frame"] = fsm.mean_selected_per_frame(selections)
    if args.gt is not None:
        gt = io.read_ground_truth(args.gt)
        try:
            report["class_agnostic_recall"] = fsm.class_agnostic_recall(selections, gt.boxes, args.iou)
        except ValueError as exc:
            raise io.InputError(str(exc)) from None
    if args.out is not None:
        io.write_selections(args.out, selections)
    print(json.dumps(report))
    return EXIT_OK


def cmd_refine(args, cfg: PipelineConfig) -> int:
    frames = io.read_frames(args.frames_file)
    weights = None
    if not cfg.skip_fam:
        if not cfg.weights_path:
            raise ConfigError("refine needs --weights (or weights_path in the config)")
        try:
            weights = io.read_weights(cfg.weights_path)
        except ShapeError as exc:
            raise ConfigError(f"{cfg.weights_path}: {exc}") from None
    try:
        results = run_refine(frames, weights, cfg)
    except ShapeError as exc:
        raise ConfigError(str(exc)) from None
    except ValueError as exc:
        if isinstance(exc, ConfigError):
            raise
        raise io.InputError(str(exc)) from None
    io.write_detections(args.out, ((r.frame_id, r.boxes, r.class_ids, r.scores) for r in results))
    return EXIT_OK


def cmd_eval(args, cfg: PipelineConfig) -> int:
    dets = io.read_detections(args.detections)
    gt = io.read_ground_truth(args.gt)
    gt_map = {k: (gt.boxes[k], gt.class_ids[k]) for k in gt.boxes}
    try:
        report = {
            "class_agnostic_recall": fsm.class_agnostic_recall({k: v[0] for k, v in dets.items()}, gt.boxes, args.iou),
            "ap50": evalbench.average_precision_50(dets, gt_map, args.iou),
        }
    except ValueError as exc:
        raise io.InputError(str(exc)) from None
    print(json.dumps(report))
    return EXIT_OK


def cmd_bench(args, cfg: PipelineConfig) -> int:
    try:
        sizes = [int(s) for s in args.sizes.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--sizes must be comma-separated integers, got {args.sizes!r}") from None
    try:
        report = evalbench.bench_attention(sizes, args.d, args.repeats, cfg.seed, args.parallel, args.heads)
    except ValueError as exc:
        raise ConfigError(str(exc)) from None
    if args.json_out is not None:
        args.json_out.write_text(report.to_json() + "\n", encoding="utf-8")
    print(report.table())
    return EXIT_OK


def cmd_weights(args, cfg: PipelineConfig) -> int:
    if args.init == "identity":
        weights = identity_weights(cfg.d, cfg.classes, args.readout_scale)
    else:
        weights = init_weights(cfg.seed, cfg.fam_config())
    io.write_weights(args.out, weights)
    return EXIT_OK


COMMANDS = {
    "synth": cmd_synth,
    "select": cmd_select,
    "refine": cmd_refine,
    "eval": cmd_eval,
    "bench": cmd_bench,
    "weights": cmd_weights,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        cfg = resolve_config(args)
        tc.set_deterministic(cfg.deterministic)
        return COMMANDS[args.command](args, cfg)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (io.InputError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"input error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":
    sys.exit(main())
