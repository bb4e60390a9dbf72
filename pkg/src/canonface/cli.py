"""Command-line front end.

Subcommands mirror the library entry points: ``train`` writes a checkpoint,
a tab-separated loss log, and loss-curve figures; ``swap`` and ``animate``
produce clip directories; ``eval`` writes a JSON report plus figures;
``viz-canonical`` writes averaged-mask grids.  Clip directories are the
numbered-PNG format of :mod:`canonface.synthworld`.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import cv2
import numpy as np

from . import report as report_mod
from . import synthworld
from .config import PipelineConfig, load_config, write_default_config
from .pipeline import SwapPipeline, load_benchmark, make_benchmark, save_benchmark, train_pipeline


def _load_image(path, size: int) -> np.ndarray:
    """Read one frame: a PNG file, or frame 0 of a clip directory."""
    path = Path(path)
    if path.is_dir():
        frame = synthworld.load_clip(path).frames[0]
    else:
        raw = cv2.imread(str(path), cv2.IMREAD_UNCHANGED)
        if raw is None:
            raise IOError(f"could not read image {path}")
        if raw.ndim == 2:
            raw = np.repeat(raw[:, :, None], 3, axis=2)
        raw = cv2.cvtColor(raw[:, :, :3], cv2.COLOR_BGR2RGB)
        peak = 65535.0 if raw.dtype == np.uint16 else 255.0
        frame = raw.astype(np.float64) / peak
    if frame.shape[0] != size or frame.shape[1] != size:
        raise ValueError(f"{path} is {frame.shape[1]}x{frame.shape[0]}, model expects {size}x{size}")
    return frame


def _load_clip_dirs(root: Path) -> list[synthworld.Clip]:
    """One clip (metadata.json at root) or every clip subdirectory."""
    if (root / "metadata.json").is_file():
        return [synthworld.load_clip(root)]
    subs = sorted(d for d in root.iterdir() if (d / "metadata.json").is_file())
    if not subs:
        raise ValueError(f"no clip directories under {root}")
    return [synthworld.load_clip(d) for d in subs]


def _cmd_train(args) -> int:
    config = load_config(args.config) if args.config else PipelineConfig()
    out_dir = Path(args.out)
    _, result = train_pipeline(config, out_dir=out_dir, progress=lambda m: print(m, flush=True))
    fig = report_mod.save_loss_curves(result["log_path"], out_dir / "loss_curves.png")
    print(f"checkpoint: {result['checkpoint_path']}")
    print(f"loss log:   {result['log_path']}")
    print(f"figures:    {fig}")
    return 0


def _cmd_swap(args) -> int:
    pipeline = SwapPipeline.load_checkpoint(args.checkpoint)
    source = _load_image(args.source, pipeline.config.image_size)
    target = synthworld.load_clip(args.target)
    swapped = pipeline.swap_clip(source, target)
    synthworld.save_clip(swapped, args.out)
    print(f"wrote {len(swapped)} swapped frame(s) to {args.out}")
    return 0


def _cmd_animate(args) -> int:
    pipeline = SwapPipeline.load_checkpoint(args.checkpoint)
    source = synthworld.load_clip(args.source)
    target = _load_image(args.target, pipeline.config.image_size)
    out = pipeline.animate_clip(source, target, shape_transfer=args.shape_transfer)
    synthworld.save_clip(out, args.out)
    print(f"wrote {len(out)} animated frame(s) to {args.out}")
    return 0


def _cmd_eval(args) -> int:
    pipeline = SwapPipeline.load_checkpoint(args.checkpoint)
    benchmark = load_benchmark(args.bench)
    result = pipeline.evaluate(benchmark, ablation_grid=args.ablation_grid)
    out_path = Path(args.out)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(json.dumps(result, indent=2))
    figures = report_mod.save_eval_figures(result, out_path.parent)
    print(f"report: {out_path}")
    for f in figures:
        print(f"figure: {f}")
    for row in result["metrics"]:
        value = "n/a" if row["value"] is None else f"{row['value']:.6g}"
        print(f"  {row['name']:<24s} {value:>12s}   [{row['estimator']}]")
    return 0


def _cmd_viz_canonical(args) -> int:
    pipeline = SwapPipeline.load_checkpoint(args.checkpoint)
    clips = _load_clip_dirs(Path(args.clips))
    viz = pipeline.visualize_canonical(clips)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    fig = report_mod.save_canonical_figure(viz, out_dir / "canonical_masks.png")
    summary = {
        "n_frames": viz["n_frames"],
        "aligned_variance": viz["aligned_variance"],
        "canonical_variance": viz["canonical_variance"],
    }
    (out_dir / "canonical_report.json").write_text(json.dumps(summary, indent=2))
    print(f"figure: {fig}")
    print(
        f"mask variance: {viz['aligned_variance']:.6g} aligned vs "
        f"{viz['canonical_variance']:.6g} canonical over {viz['n_frames']} frame(s)"
    )
    return 0


def _cmd_init_config(args) -> int:
    write_default_config(args.out)
    print(f"wrote default config to {args.out}")
    return 0


def _cmd_gen_bench(args) -> int:
    pairs = make_benchmark(args.pairs, image_size=args.size, seed=args.seed, n_frames=args.frames)
    save_benchmark(pairs, args.out)
    print(f"wrote {len(pairs)} benchmark pair(s) to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="canonface", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="pre-train the backbone and run swap training")
    p.add_argument("--config", help="TOML config file (defaults when omitted)")
    p.add_argument("--out", required=True, help="output directory for checkpoint/log/figures")
    p.set_defaults(func=_cmd_train)

    p = sub.add_parser("swap", help="swap a source identity onto a target clip")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source image (PNG or clip dir, frame 0)")
    p.add_argument("--target", required=True, help="target clip directory")
    p.add_argument("--out", required=True, help="output clip directory")
    p.set_defaults(func=_cmd_swap)

    p = sub.add_parser("animate", help="drive a target image with a source clip's expressions")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--source", required=True, help="source clip directory")
    p.add_argument("--target", required=True, help="target image (PNG or clip dir, frame 0)")
    p.add_argument("--out", required=True, help="output clip directory")
    p.add_argument("--shape-transfer", action="store_true", help="use the source's canonical layout")
    p.set_defaults(func=_cmd_animate)

    p = sub.add_parser("eval", help="score swaps over a benchmark directory")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bench", required=True, help="benchmark directory (pair_*/source, pair_*/target)")
    p.add_argument("--out", required=True, help="output JSON report path")
    p.add_argument("--ablation-grid", action="store_true", help="also score inference-time bypasses")
    p.set_defaults(func=_cmd_eval)

    p = sub.add_parser("viz-canonical", help="averaged part masks in aligned vs canonical space")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--clips", required=True, help="clip directory, or directory of clip directories")
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=_cmd_viz_canonical)

    p = sub.add_parser("init-config", help="write the default TOML config")
    p.add_argument("--out", required=True)
    p.set_defaults(func=_cmd_init_config)

    p = sub.add_parser("gen-bench", help="render a deterministic synthetic benchmark")
    p.add_argument("--out", required=True)
    p.add_argument("--pairs", type=int, default=4)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--frames", type=int, default=40)
    p.add_argument("--size", type=int, default=64)
    p.set_defaults(func=_cmd_gen_bench)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
