"""Command-line interface.

Subcommands: train, infer, eval, synth, ablate, report. Every command
accepts --config (YAML) plus repeatable --set overrides and writes a
manifest.json with the fully resolved configuration next to its outputs.
"""

from __future__ import annotations

import argparse
import sys
from dataclasses import asdict
from pathlib import Path

import torch

from .config import (ConfigError, ModelConfig, apply_overrides, load_config,
                     validate_config)
from .data import (DataError, SynthConfig, index_dataset, index_frames,
                   index_summary, load_frame, preprocess_frame, save_mask,
                   synthesize_dataset)
from .layers import resize_to
from .metrics import evaluate_tree
from .model import ABLATION_VARIANTS, StreamState, apply_variant
from .report import (emit_report, format_summary_table, write_frame_csv,
                     write_manifest, write_summary_csv)
from .training import check_structure, evaluate_on_clips, model_from_checkpoint, train


def _add_common(p):
    p.add_argument("--config", help="YAML config file")
    p.add_argument("--set", action="append", default=[], metavar="FIELD=VALUE",
                   help="override one config field, e.g. --set train.lr=3e-4")
    p.add_argument("--threads", type=int, default=1,
                   help="torch thread count (1 keeps runs deterministic)")


def _build_config(args) -> ModelConfig:
    cfg = load_config(args.config) if args.config else ModelConfig()
    if args.set:
        cfg = apply_overrides(cfg, args.set)
    return validate_config(cfg)


def cmd_train(args) -> int:
    torch.set_num_threads(args.threads)
    cfg = _build_config(args)
    clips = index_dataset(args.data, args.subset)
    print(f"indexed {index_summary(clips)} from {args.data}/{args.subset}")
    write_manifest(args.out, cfg, "train",
                   {"data": str(args.data), "subset": args.subset,
                    "resume": str(args.resume) if args.resume else None})
    result = train(cfg, clips, args.out, resume=args.resume, quiet=args.quiet)
    print(f"done: {result.steps} steps over {result.epochs_completed} epochs; "
          f"checkpoint at {result.checkpoint_path}")
    return 0


def cmd_infer(args) -> int:
    torch.set_num_threads(args.threads)
    model, cfg, payload = model_from_checkpoint(args.checkpoint)
    if args.variant:
        cfg = apply_variant(cfg, args.variant)
    if args.set:
        cfg = validate_config(apply_overrides(cfg, args.set))
    check_structure(payload, cfg)
    model.cfg = cfg

    clips = index_frames(args.frames)
    if args.state_in or args.state_out:
        if len(clips) != 1:
            raise DataError("stream state files apply to a single clip input")
    out = Path(args.out)
    write_manifest(out, cfg, "infer",
                   {"checkpoint": str(args.checkpoint), "frames": str(args.frames),
                    "variant": args.variant})
    model.eval()
    for clip in clips:
        if args.state_in:
            state = StreamState.from_state_dict(
                torch.load(args.state_in, map_location="cpu", weights_only=True))
        else:
            state = model.new_stream()
        with torch.no_grad():
            for path in clip.frame_paths:
                arr = load_frame(path)
                tensor = preprocess_frame(arr, cfg.input_size, cfg.norm_mean,
                                          cfg.norm_std).unsqueeze(0)
                pred, state = model.step(tensor, state)
                prob = resize_to(pred.probability, arr.shape[:2])
                save_mask(out / clip.clip_id / f"{path.stem}.png",
                          prob.squeeze().numpy())
        if args.state_out:
            torch.save(state.state_dict(), args.state_out)
        print(f"clip {clip.clip_id}: {len(clip)} frames -> {out / clip.clip_id}")
    return 0


def cmd_eval(args) -> int:
    cfg = _build_config(args)
    overall, per_clip, report = evaluate_tree(args.pred, args.gt,
                                              per_clip=args.per_clip)
    out = Path(args.out)
    write_manifest(out, cfg, "eval",
                   {"pred": str(args.pred), "gt": str(args.gt),
                    "per_clip": bool(args.per_clip)})
    write_frame_csv(out / "frames.csv", report)
    rows = {"overall": overall}
    rows.update(per_clip)
    write_summary_csv(out / "summary.csv", rows)
    print(format_summary_table(rows))
    return 0


def cmd_synth(args) -> int:
    cfg = _build_config(args)
    synth = SynthConfig(
        n_frames=args.frames, size=(args.size[0], args.size[1]),
        n_blobs=args.blobs, motion_amplitude=args.motion,
        jitter_amplitude=args.jitter, deform_amplitude=args.deform,
        low_quality_start=args.lq_start, low_quality_length=args.lq_length,
        low_quality_severity=args.lq_severity, seed=args.seed)
    clips = synthesize_dataset(args.out, args.subset, args.clips, synth)
    write_manifest(Path(args.out) / args.subset, cfg, "synth",
                   {"synthetic": asdict(synth) | {"out": str(args.out),
                                                  "clips": args.clips}})
    print(f"wrote {index_summary(clips)} under {Path(args.out) / args.subset}")
    return 0


def cmd_ablate(args) -> int:
    torch.set_num_threads(args.threads)
    cfg = _build_config(args)
    variants = args.variants or list(ABLATION_VARIANTS)
    train_clips = index_dataset(args.data, args.train_subset)
    eval_clips = index_dataset(args.data, args.eval_subset)
    out = Path(args.out)
    write_manifest(out, cfg, "ablate",
                   {"variants": variants, "data": str(args.data),
                    "train_subset": args.train_subset,
                    "eval_subset": args.eval_subset})
    rows = {}
    for variant in variants:
        vcfg = apply_variant(cfg, variant)
        print(f"[{variant}] training...")
        result = train(vcfg, train_clips, out / variant, quiet=True)
        model, _, _ = model_from_checkpoint(result.checkpoint_path)
        model.cfg = vcfg
        report = evaluate_on_clips(model, vcfg, eval_clips)
        write_frame_csv(out / variant / "frames.csv", report)
        rows[variant] = report.aggregate()
        print(f"[{variant}] dice {rows[variant]['dice']:.4f}")
    write_summary_csv(out / "ablation_table.csv", rows)
    print(format_summary_table(rows))
    return 0


def cmd_report(args) -> int:
    loss_log = None
    if args.run:
        candidate = Path(args.run) / "training_log.csv"
        if candidate.exists():
            loss_log = candidate
        elif args.metrics is None:
            raise DataError(f"no training_log.csv under {args.run}")
    written = emit_report(args.out, loss_log=loss_log, frame_csv=args.metrics)
    for path in written:
        print(f"wrote {path}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="polypvs",
        description="Online video polyp segmentation: train, stream, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model on an indexed dataset")
    _add_common(p)
    p.add_argument("--data", required=True, help="dataset root")
    p.add_argument("--subset", required=True, help="subset folder name")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--resume", help="checkpoint to resume from")
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", help="stream frames through a checkpoint")
    _add_common(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--frames", required=True,
                   help="folder of images, or a Frame/ tree of per-clip folders")
    p.add_argument("--out", required=True)
    p.add_argument("--variant", choices=sorted(ABLATION_VARIANTS),
                   help="ablation variant to apply at inference")
    p.add_argument("--state-in", help="resume a stream from a saved state file")
    p.add_argument("--state-out", help="save the final stream state")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", help="score predictions against ground truth")
    _add_common(p)
    p.add_argument("--pred", required=True, help="prediction tree (per-clip folders)")
    p.add_argument("--gt", required=True, help="ground-truth tree (per-clip folders)")
    p.add_argument("--out", required=True)
    p.add_argument("--per-clip", action="store_true",
                   help="aggregate per clip, then average clips")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("synth", help="generate a synthetic video dataset")
    _add_common(p)
    p.add_argument("--out", required=True, help="dataset root to write into")
    p.add_argument("--subset", default="synthetic")
    p.add_argument("--clips", type=int, default=4)
    p.add_argument("--frames", type=int, default=20)
    p.add_argument("--size", type=int, nargs=2, default=[64, 64], metavar=("H", "W"))
    p.add_argument("--blobs", type=int, default=1)
    p.add_argument("--motion", type=float, default=1.5)
    p.add_argument("--jitter", type=float, default=0.8)
    p.add_argument("--deform", type=float, default=0.22)
    p.add_argument("--lq-start", type=int, default=-1)
    p.add_argument("--lq-length", type=int, default=0)
    p.add_argument("--lq-severity", type=float, default=0.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("ablate", help="train and score ablation variants")
    _add_common(p)
    p.add_argument("--data", required=True)
    p.add_argument("--train-subset", required=True)
    p.add_argument("--eval-subset", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--variants", nargs="*",
                   help=f"subset of: {', '.join(sorted(ABLATION_VARIANTS))}")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("report", help="render figures from run outputs")
    p.add_argument("--run", help="run directory holding training_log.csv")
    p.add_argument("--metrics", help="per-frame metrics CSV from eval")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_report)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        # missing checkpoint / metrics / dataset paths surface here
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
