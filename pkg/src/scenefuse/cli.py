"""Command line entry point: `scenefuse <stage> [options]` or `scenefuse run`."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

import numpy as np

from . import fusion as fz
from .camera import Camera
from .geometry import read_ply, write_ply
from .pipeline import STAGES, PipelineConfig, StageError, Workspace, build_context, field_path, run_pipeline, \
    sha256_file
from .scenegen import save_png

ALIASES = {"register-scenes": "align", "match-objects": "match"}


def parse_target(text: str):
    if text == fz.BACKGROUND:
        return fz.BACKGROUND
    if text.startswith("object:"):
        return int(text.split(":", 1)[1])
    raise argparse.ArgumentTypeError("target must be 'background' or 'object:<j>'")


def _load_cameras(path) -> list[Camera]:
    with open(path) as fh:
        meta = json.load(fh)
    frames = meta if isinstance(meta, list) else meta.get("frames", []) + meta.get("holdout", [])
    return [Camera.from_dict(c) for c in frames]


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="pipeline configuration JSON")
    common.add_argument("--workspace", type=str, help="output directory (default: workspace)")
    common.add_argument("--seed", type=int, help="master seed")
    common.add_argument("--dataset", type=str, help="use an existing dataset instead of synthesizing")
    common.add_argument("--vis-res", type=int, dest="vis_res", help="visibility grid resolution (default 64)")
    common.add_argument("--smooth-iters", type=int, dest="smooth_iters", help="visibility smoothing iterations (default 4)")
    common.add_argument("--p", type=float, help="fusion exponent (default 16)")
    common.add_argument("--force", action="store_true", help="rerun even if outputs are up to date")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="scenefuse", description=__doc__, parents=[common])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in STAGES:
        sub.add_parser(name, parents=[common], help=f"run the {name} stage")
    for alias, stage in ALIASES.items():
        sub.add_parser(alias, parents=[common], help=f"same as {stage}")
    sub.add_parser("run", parents=[common], help="run every stage in order")
    for name in ("render", "fuse"):
        r = sub.add_parser(name, parents=[common], help="render the fused background or an object")
        r.add_argument("--target", type=parse_target, default=fz.BACKGROUND)
        r.add_argument("--views", type=Path, required=True, help="cameras JSON (list or {frames, holdout})")
        r.add_argument("--out", type=Path, required=True)
    return parser


def make_config(args) -> PipelineConfig:
    overrides = {k: getattr(args, k, None) for k in ("workspace", "seed", "dataset", "vis_res", "smooth_iters", "p")}
    if args.config:
        return PipelineConfig.from_json(args.config, **overrides)
    return PipelineConfig(**{k: v for k, v in overrides.items() if v is not None})


def render_command(config: PipelineConfig, target, views: Path, out: Path) -> None:
    ws = Workspace(config)
    ctx = build_context(ws, config.p)
    out.mkdir(parents=True, exist_ok=True)
    settings = ctx.default_settings()
    for k, cam in enumerate(_load_cameras(views)):
        img, _, _ = fz.render_fused(cam, ctx, target, settings)
        save_png(out / f"{k:03d}.png", img)
    if target == fz.BACKGROUND:
        cloud = read_ply(ws.root / "clouds" / "background.ply")
    else:
        cloud = read_ply(ws.root / "segments" / f"scene_1_object_{target}.ply")
    write_ply(out / "labels.ply", fz.export_scene_labels(cloud, ctx, target))
    manifest = {
        "N": len(ctx.scenes), "p": ctx.p, "target": target,
        "poses": [sc.to_reference.to_dict() for sc in ctx.scenes],
        "fields": {f"scene_{i}": sha256_file(field_path(ws, i)) for i in range(1, len(ctx.scenes) + 1)},
    }
    if target != fz.BACKGROUND:
        manifest["object_poses"] = [None if q is None else q.to_dict() for q in ctx.object_poses[target]]
    with open(out / "fusion.json", "w") as fh:
        json.dump(manifest, fh, indent=1)


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        config = make_config(args)
        if args.command in ("render", "fuse"):
            render_command(config, args.target, args.views, args.out)
            return 0
        stages = STAGES if args.command == "run" else (ALIASES.get(args.command, args.command),)
        report = run_pipeline(config, stages, force=args.force)
    except (StageError, ValueError, FileNotFoundError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    for rec in report.stages:
        print(f"{rec.name:<11} {rec.status:<8} {rec.seconds:8.1f} s")
    for note in report.notices:
        print(f"notice: {note}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
