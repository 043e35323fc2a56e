"""Command line entry point: ``stavc <subcommand> ...``.

Exit codes: 0 ok, 2 usage, 3 data, 4 codec or synchronisation failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import torch

from . import codec
from .data import SyntheticSource, generate_clip, load_frames, save_frames
from .errors import (CodingError, CorruptStreamError, IngestionError, SyncError, UsageError)
from .evaluate import comparison_table, evaluate_clip, external_codec_harness, rd_sweep
from .scale_space import build_scale_space_volume
from .training import TrainConfig, train
from .transforms import Variant, VariantConfig, VideoModel

log = logging.getLogger("stavc")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_CODEC = 0, 2, 3, 4


def _load_model(path: str, variant: str | None) -> tuple[VideoModel, dict]:
    model, meta = VideoModel.load(path)
    if variant is not None and Variant.parse(variant) != model.cfg.variant:
        raise UsageError(f"--variant {variant} does not match checkpoint variant "
                         f"{model.cfg.variant.name}")
    model.eval()
    return model, meta


def cmd_train(args) -> int:
    cfg = TrainConfig.from_file(args.config) if args.config else TrainConfig()
    overrides = {k: getattr(args, k) for k in ("beta", "steps", "seed", "batch", "crop")
                 if getattr(args, k) is not None}
    cfg = replace(cfg, **overrides, decay_step=None if "steps" in overrides else cfg.decay_step)
    vcfg = VariantConfig(args.variant, structured_prior=args.structured_prior)
    model = VideoModel.create(vcfg, seed=cfg.seed)
    source = SyntheticSource(size=max(args.source_size, cfg.final_crop, cfg.crop), seed=cfg.seed)
    result = train(model, source, cfg, args.output)
    last = result.curve[-1] if result.curve else {}
    print(json.dumps({"checkpoint": str(result.checkpoint), "final": last}))
    return EXIT_OK


def cmd_encode(args) -> int:
    model, meta = _load_model(args.checkpoint, args.variant)
    clip = load_frames(args.input)
    if args.dump_scale_space:
        vol = build_scale_space_volume(clip.frames[0], model.cfg.sigma0, model.cfg.depth)
        save_frames(vol.levels[0], args.dump_scale_space, prefix="level")
    result = codec.encode_video(clip.frames, model, float(meta.get("beta", 0.0)))
    Path(args.output).write_bytes(result.stream)
    summary = {"bytes": len(result.stream), "frames": len(clip),
               "bpp": codec.stream_bpp(result.stream, len(clip), clip.height, clip.width),
               "estimated_bits": result.estimated_bits}
    print(json.dumps(summary))
    return EXIT_OK


def cmd_decode(args) -> int:
    model, _ = _load_model(args.checkpoint, args.variant)
    frames = codec.decode_video(Path(args.input).read_bytes(), model)
    save_frames(frames, args.output)
    print(json.dumps({"frames": frames.shape[0], "output": args.output}))
    return EXIT_OK


def cmd_eval(args) -> int:
    model, meta = _load_model(args.checkpoint, args.variant)
    clip = load_frames(args.input)
    ev = evaluate_clip(model, clip, float(meta.get("beta", 0.0)))
    pixels = len(clip) * clip.height * clip.width
    out = {"bpp": 8.0 * ev.nbytes / pixels, "estimated_bpp": ev.estimated_bits / pixels,
           "psnr": sum(ev.frame_psnr) / len(ev.frame_psnr), "frame_psnr": ev.frame_psnr,
           "frame_bits": ev.frame_bits, "seconds": ev.seconds}
    print(json.dumps(out))
    return EXIT_OK


def _sweep_clips(args) -> list:
    if args.input:
        return [(p, load_frames(p)) for p in args.input]
    src = SyntheticSource(size=args.size, seed=args.seed)
    return [(f"synthetic_{i}", generate_clip(src, args.frames, index=i)) for i in range(args.clips)]


def cmd_sweep(args) -> int:
    report = rd_sweep(args.checkpoint, _sweep_clips(args), args.output,
                      record_timing=not args.no_timing)
    if args.table:
        Path(args.table).write_text(comparison_table(report.points))
    if args.json:
        Path(args.json).write_text(json.dumps(report.to_dict(), indent=2))
    sys.stdout.write(report.to_csv())
    return EXIT_OK


def cmd_gen_data(args) -> int:
    src = SyntheticSource(size=args.size, seed=args.seed, sprites=args.sprites)
    out = Path(args.output)
    for i in range(args.clips):
        save_frames(generate_clip(src, args.frames, index=i), out / f"clip_{i:04d}")
    print(json.dumps({"clips": args.clips, "output": str(out)}))
    return EXIT_OK


def cmd_compare_external(args) -> int:
    result = external_codec_harness(args.input, args.crf, rgb=not args.yuv, ffmpeg=args.ffmpeg)
    print(json.dumps({"status": result.status, "errors": result.errors,
                      "points": [p.csv_row() for p in result.points]}))
    if args.output and result.points:
        from .evaluate import EvalReport

        Path(args.output).write_text(EvalReport(result.points).to_csv())
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="stavc", description=__doc__.splitlines()[0])
    parser.add_argument("--verbose", action="store_true")
    parser.add_argument("--threads", type=int, default=None, help="torch intra-op threads")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on synthetic clips")
    p.add_argument("--variant", default="STAT_SSF")
    p.add_argument("--structured-prior", action="store_true")
    p.add_argument("--config", help="TrainConfig as JSON or TOML")
    p.add_argument("--beta", type=float)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--crop", type=int)
    p.add_argument("--source-size", type=int, default=96)
    p.add_argument("--output", required=True, help="directory for loss.csv and checkpoints")
    p.set_defaults(func=cmd_train)

    for name, func, helptext in (("encode", cmd_encode, "compress frames to a bitstream"),
                                 ("decode", cmd_decode, "decompress a bitstream to PNG frames"),
                                 ("eval", cmd_eval, "encode+decode and report bpp/PSNR")):
        p = sub.add_parser(name, help=helptext)
        p.add_argument("--input", required=True)
        p.add_argument("--checkpoint", required=True)
        p.add_argument("--variant", help="must match the checkpoint when given")
        if name != "eval":
            p.add_argument("--output", required=True)
        if name == "encode":
            p.add_argument("--dump-scale-space", metavar="DIR",
                           help="write the first frame's scale-space levels as PNGs")
        p.set_defaults(func=func)

    p = sub.add_parser("sweep", help="RD points for several checkpoints")
    p.add_argument("--checkpoint", action="append", required=True)
    p.add_argument("--input", action="append", help="frame directory (repeatable)")
    p.add_argument("--clips", type=int, default=2, help="synthetic clips when no --input")
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--seed", type=int, default=100)
    p.add_argument("--output", help="CSV path")
    p.add_argument("--table", help="markdown comparison table path")
    p.add_argument("--json", help="full report path")
    p.add_argument("--no-timing", action="store_true", help="zero the seconds column")
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("gen-data", help="write synthetic clips as PNG frames")
    p.add_argument("--output", required=True)
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--frames", type=int, default=10)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--sprites", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("compare-external", help="HEVC reference points via ffmpeg")
    p.add_argument("--input", required=True, help="frame directory")
    p.add_argument("--crf", type=int, action="append", required=True)
    p.add_argument("--yuv", action="store_true", help="let x265 use 4:2:0 instead of RGB")
    p.add_argument("--ffmpeg", default="ffmpeg")
    p.add_argument("--output", help="CSV path")
    p.set_defaults(func=cmd_compare_external)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_USAGE if exc.code else EXIT_OK
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.threads:
        torch.set_num_threads(args.threads)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"stavc: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (IngestionError, CorruptStreamError, FileNotFoundError) as exc:
        print(f"stavc: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (SyncError, CodingError) as exc:
        print(f"stavc: codec error: {exc}", file=sys.stderr)
        return EXIT_CODEC


if __name__ == "__main__":
    sys.exit(main())
