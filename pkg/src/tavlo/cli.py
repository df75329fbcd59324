"""Command-line entry point.

Subcommands: generate (synthetic suite), sample (clip/frame sampling over
raw media), train, evaluate, export-heatmaps. Exit codes: 0 success,
2 config error, 3 data error, 4 numerical abort.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

from .config import RunConfig
from .errors import ConfigError, DataError, InvalidInputError, NumericalError
from . import harness, tensorio
from .ingest import FrameSequence, SamplingConfig, Waveform, detect_audio_events, sample_clips, sample_frames
from .synth import make_suite, write_suite


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tavlo",
        description="Temporal audio-visual localization: synthesize, sample, train, evaluate.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("generate", help="write a synthetic scene suite")
    gen.add_argument("--config", required=True, help="run config YAML")
    gen.add_argument("--out", required=True, help="output suite directory")
    gen.add_argument("--seed", type=int, default=None, help="override data.suite_seed")

    smp = sub.add_parser("sample", help="audio-driven clip/frame sampling over raw media")
    smp.add_argument("--audio", required=True, help="mono PCM WAV file")
    smp.add_argument("--frames", default=None, help="directory of numbered frame images")
    smp.add_argument("--fps", type=float, default=4.0, help="frame rate of --frames")
    smp.add_argument("--out", required=True, help="manifest path to write")
    smp.add_argument("--rms-interval", type=float, default=1.0)
    smp.add_argument("--rms-threshold", type=float, default=0.01)
    smp.add_argument("--window-length", type=float, default=10.0)
    smp.add_argument("--min-active", type=int, default=5)

    trn = sub.add_parser("train", help="train from a run config")
    trn.add_argument("--config", required=True)
    trn.add_argument("--out", required=True, help="checkpoint/output directory")
    trn.add_argument("--seed", type=int, default=None, help="override optimizer.seed")
    trn.add_argument("--deterministic", action="store_true")

    ev = sub.add_parser("evaluate", help="score a checkpoint on a dataset split")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--config", default=None, help="override the checkpoint's config")
    ev.add_argument("--split", default="test", choices=("train", "val", "test"))
    ev.add_argument("--seed", type=int, default=None, help="override data.suite_seed")
    ev.add_argument("--out", default=None, help="write the report as JSON here")
    ev.add_argument("--oracle", action="store_true",
                    help="inject ground-truth masks as heatmaps (plumbing check)")

    exp = sub.add_parser("export-heatmaps", help="write heatmap and overlay images")
    exp.add_argument("--checkpoint", required=True)
    exp.add_argument("--config", default=None)
    exp.add_argument("--split", default="test", choices=("train", "val", "test"))
    exp.add_argument("--seed", type=int, default=None, help="override data.suite_seed")
    exp.add_argument("--out", required=True, help="output image directory")
    return parser


def _cmd_generate(args) -> int:
    cfg = RunConfig.from_yaml(args.config)
    if cfg.data.suite_counts is None:
        raise ConfigError("data.suite_counts: generate needs a synthetic suite spec")
    seed = cfg.data.suite_seed if args.seed is None else args.seed
    clips = make_suite(seed, cfg.data.suite_counts,
                       t_frames=cfg.model.t_frames,
                       image_size=(cfg.model.frame_size, cfg.model.frame_size),
                       fps=cfg.data.fps)
    out = write_suite(clips, args.out)
    splits = sorted({c.split for c in clips})
    print(f"wrote {len(clips)} clips to {out} (splits: {', '.join(splits)})")
    return 0


def _cmd_sample(args) -> int:
    samples, sr = tensorio.read_wav(args.audio)
    waveform = Waveform(samples=samples, sample_rate=sr)
    sampling = SamplingConfig(
        rms_interval=args.rms_interval, rms_threshold=args.rms_threshold,
        window_length=args.window_length, min_active_intervals=args.min_active)
    fs = None
    if args.frames is not None:
        fs = FrameSequence(frames=tensorio.load_frame_images(args.frames), fps=args.fps)
    starts = sample_clips(waveform, sampling)
    events = detect_audio_events(waveform, sampling)
    records = []
    for k, start in enumerate(starts):
        in_window = [ev for ev in events
                     if start <= ev.peak_time <= start + sampling.window_length]
        selected = sample_frames(fs, in_window, sampling) if fs is not None else []
        records.append({
            "clip_id": f"{Path(args.audio).stem}-{k:03d}",
            "media_path": str(Path(args.audio).resolve()),
            "start_seconds": start,
            "selected_frame_indices": selected,
            "event_peak_times": [ev.peak_time for ev in in_window],
        })
    tensorio.write_manifest(args.out, records)
    print(f"wrote {len(records)} clip candidates to {args.out}")
    return 0


def _cmd_train(args) -> int:
    cfg = RunConfig.from_yaml(args.config)
    if args.seed is not None:
        cfg.optimizer.seed = args.seed
    result = harness.train(cfg, out_dir=args.out, deterministic=args.deterministic)
    final = result.history[-1]["loss"] if result.history else float("nan")
    print(f"trained {len(result.history)} steps, final loss {final:.4f}, "
          f"checkpoint {result.checkpoint_path}")
    return 0


def _load_for_inference(args):
    ckpt = harness.load_checkpoint(args.checkpoint)
    cfg = RunConfig.from_yaml(args.config) if args.config else ckpt.run_config
    if args.seed is not None:
        cfg.data.suite_seed = args.seed
    return ckpt, cfg


def _cmd_evaluate(args) -> int:
    ckpt, cfg = _load_for_inference(args)
    report = harness.evaluate(ckpt, cfg, split=args.split, oracle=args.oracle)
    print(report.format_table())
    if args.out:
        payload = {"cells": report.cells, "records": report.to_records(),
                   "n_records": report.n_records, "auc_grid": report.auc_grid}
        Path(args.out).write_text(json.dumps(payload, indent=2, sort_keys=True))
        print(f"report written to {args.out}")
    return 0


def _cmd_export(args) -> int:
    ckpt, cfg = _load_for_inference(args)
    examples = harness.build_examples(cfg)[args.split]
    files = harness.export_heatmaps(ckpt.model, examples, args.out)
    print(f"wrote {len(files)} images to {args.out}")
    return 0


_COMMANDS = {
    "generate": _cmd_generate,
    "sample": _cmd_sample,
    "train": _cmd_train,
    "evaluate": _cmd_evaluate,
    "export-heatmaps": _cmd_export,
}


def main(argv: list[str] | None = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (DataError, InvalidInputError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"numerical abort: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
