"""``wirepipe`` command line.

Exit codes: 0 success, 2 usage or validation error, 3 runtime failure.
Every command validates its inputs and configuration before writing
anything, writes outputs atomically, and finishes by writing a JSON run
manifest (``--manifest``, default next to the primary output).
"""
from __future__ import annotations

import argparse
import json
import os
import subprocess
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .dataset import read_manifest, scene_record, scene_seed, synth_scene, write_manifest
from .evaluation import (
    confusion,
    inpainting_report,
    psnr,
    segmentation_report,
    write_report,
)
from .imagecore import InvalidInputError
from .inpaint import DiffusionInpainter
from .io import (
    atomic_write_bytes,
    read_image,
    read_mask,
    write_image,
    write_mask,
    write_prob,
)
from .model import (
    CheckpointError,
    OracleSegmenter,
    TinyConvSegmenter,
    load_checkpoint,
    save_checkpoint,
    train_tiny,
)
from .pipeline import PipelineConfig, profile, remove_report, segment

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 2, 3
THREADS_ENV = "WIREPIPE_THREADS"


class UsageError(Exception):
    """Bad arguments, configuration or inputs (exit code 2)."""


# ---------------------------------------------------------------------------
# shared plumbing
# ---------------------------------------------------------------------------

def version_string() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(["git", "describe", "--tags", "--always", "--dirty"],
                             cwd=Path(__file__).parent, capture_output=True, text=True,
                             timeout=5)
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+g{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def resolve_threads(value) -> int:
    if value is None:
        value = os.environ.get(THREADS_ENV, "1")
    try:
        n = int(value)
    except ValueError:
        raise UsageError(f"threads must be an integer, got {value!r}") from None
    if n < 1:
        raise UsageError(f"threads must be >= 1, got {n}")
    return n


# CLI flag -> PipelineConfig field
CONFIG_FLAGS = {
    "alpha": "alpha",
    "patch": "p_infer",
    "stride": "stride",
    "p_train": "p_train",
    "kernel": "minmax_kernel",
    "tile": "inpaint_tile",
    "overlap": "inpaint_overlap",
    "onion_d": "onion_d",
}


def build_config(args) -> PipelineConfig:
    """Built-in defaults, overridden by ``--config`` JSON, overridden by flags."""
    values = {}
    if getattr(args, "config", None):
        path = Path(args.config)
        try:
            data = json.loads(path.read_text())
        except FileNotFoundError:
            raise UsageError(f"config file not found: {path}") from None
        except json.JSONDecodeError as exc:
            raise UsageError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(data, dict):
            raise UsageError(f"config file {path} must hold a JSON object")
        values.update(data)
    for flag, name in CONFIG_FLAGS.items():
        v = getattr(args, flag, None)
        if v is not None:
            values[name] = v
    return PipelineConfig.from_mapping(values)


def require_file(path) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"input file not found: {p}")
    return p


def require_dir(path) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"input directory not found: {p}")
    return p


def png_files(directory: Path) -> list[Path]:
    files = sorted(directory.glob("*.png"))
    if not files:
        raise UsageError(f"no PNG files in {directory}")
    return files


def load_model(spec: str, shape=None):
    """``oracle:<mask.png>`` replays a ground-truth mask; anything else is a checkpoint."""
    if spec.startswith("oracle:"):
        mask = read_mask(require_file(spec[len("oracle:"):]))
        if shape is not None and mask.shape != tuple(shape):
            raise UsageError(f"oracle mask {mask.shape} does not match image {tuple(shape)}")
        return OracleSegmenter(mask)
    try:
        return load_checkpoint(require_file(spec))
    except CheckpointError as exc:
        raise UsageError(str(exc)) from None


def write_run_manifest(path, command: str, args, config, inputs, outputs, stats, t0) -> None:
    manifest = {
        "command": command,
        "version": version_string(),
        "argv": sys.argv[1:],
        "seed": getattr(args, "seed", None),
        "threads": getattr(args, "threads_resolved", None),
        "config": config,
        "inputs": {k: str(v) for k, v in inputs.items()},
        "outputs": {k: str(v) for k, v in outputs.items()},
        "stats": stats,
        "wall_clock_s": time.perf_counter() - t0,
    }
    atomic_write_bytes(path, (json.dumps(manifest, indent=2, default=str) + "\n").encode())


def manifest_path(args, primary) -> Path:
    if args.manifest:
        return Path(args.manifest)
    primary = Path(primary)
    return primary / "run.json" if primary.is_dir() else primary.with_name(primary.name + ".run.json")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_segment(args, t0) -> int:
    cfg = build_config(args)
    img = read_image(require_file(args.image))
    model = load_model(args.model, img.shape[:2])
    res = segment(img, model, cfg, args.threads_resolved)
    write_mask(args.out_mask, res.mask)
    outputs = {"mask": args.out_mask}
    if args.out_prob:
        write_prob(args.out_prob, res.prob)
        outputs["prob"] = args.out_prob
    stats = {"windows_total": res.windows_total, "windows_refined": res.windows_refined,
             "elapsed": res.elapsed, "wire_fraction": float(res.mask.mean())}
    print(f"windows refined {res.windows_refined}/{res.windows_total}, "
          f"wire pixels {int(res.mask.sum())}, {res.elapsed['total']:.3f} s")
    write_run_manifest(manifest_path(args, args.out_mask), "segment", args, cfg.to_dict(),
                       {"image": args.image, "model": args.model}, outputs, stats, t0)
    return EXIT_OK


def cmd_remove(args, t0) -> int:
    cfg = build_config(args)
    src = require_file(args.image)
    clean = read_image(require_file(args.clean))[:, :, :3] if args.clean else None
    img = read_image(src)
    if clean is not None and clean.shape != img.shape[:2] + (3,):
        raise UsageError(f"clean plate {clean.shape} does not match image {img.shape}")
    model = load_model(args.model, img.shape[:2])
    rep = remove_report(img, model, DiffusionInpainter(iters=args.iters), cfg,
                        args.threads_resolved)
    seg = rep.segmentation
    if not seg.mask.any():
        # nothing to remove: hand back the input file untouched
        atomic_write_bytes(args.out, src.read_bytes())
    else:
        write_image(args.out, rep.image)
    outputs = {"image": args.out}
    if args.out_mask:
        write_mask(args.out_mask, seg.mask)
        outputs["mask"] = args.out_mask
    stats = {"windows_refined": seg.windows_refined, "windows_total": seg.windows_total,
             "tiles_processed": rep.inpaint.tiles_processed, "tiles_total": rep.inpaint.tiles_total}
    msg = f"tiles inpainted {rep.inpaint.tiles_processed}/{rep.inpaint.tiles_total}"
    if clean is not None:
        stats["psnr_input"] = psnr(img[:, :, :3], clean)
        stats["psnr_output"] = psnr(read_image(args.out)[:, :, :3], clean)
        msg += f", PSNR vs clean {stats['psnr_input']:.2f} -> {stats['psnr_output']:.2f} dB"
    print(msg)
    write_run_manifest(manifest_path(args, args.out), "remove", args, cfg.to_dict(),
                       {"image": args.image, "model": args.model, "clean": args.clean},
                       outputs, stats, t0)
    return EXIT_OK


def cmd_gen_synth(args, t0) -> int:
    if args.count < 0:
        raise UsageError(f"count must be >= 0, got {args.count}")
    if args.size < 64:
        raise UsageError(f"size must be >= 64, got {args.size}")
    out = Path(args.out_dir)
    records = []
    for i in range(args.count):
        scene = synth_scene(args.size, args.size, n_wires=args.wires,
                            seed=scene_seed(args.seed, i))
        name = f"{i:04d}.png"
        write_image(out / "images" / name, scene.image)
        write_mask(out / "masks" / name, scene.mask)
        write_image(out / "clean" / name, scene.background)
        records.append(scene_record(scene, image=f"images/{name}", mask=f"masks/{name}",
                                    clean=f"clean/{name}"))
    write_manifest(out / "manifest.jsonl", records)
    print(f"wrote {args.count} scenes to {out}")
    write_run_manifest(manifest_path(args, out), "gen-synth", args, None, {},
                       {"dir": out, "manifest": out / "manifest.jsonl"},
                       {"count": args.count, "size": args.size}, t0)
    return EXIT_OK


def _training_scenes(data) -> list[tuple[np.ndarray, np.ndarray]]:
    path = Path(data)
    if path.is_dir():
        path = path / "manifest.jsonl"
    recs = read_manifest(require_file(path))
    if not recs:
        raise UsageError(f"no scenes listed in {path}")
    scenes = []
    for r in recs:
        img = read_image(require_file(r["image"]))[:, :, :3]
        mask = read_mask(require_file(r["mask"]))
        scenes.append((img, mask))
    return scenes


def cmd_train_tiny(args, t0) -> int:
    cfg = build_config(args)
    if args.iters < 0:
        raise UsageError(f"iters must be >= 0, got {args.iters}")
    if args.batch_size < 1:
        raise UsageError(f"batch size must be >= 1, got {args.batch_size}")
    scenes = _training_scenes(args.data)
    model = TinyConvSegmenter(width=args.width, seed=args.seed, lr=args.lr,
                              momentum=args.momentum)

    def report(log):
        if args.log_every and (log.step + 1) % args.log_every == 0:
            r = log.report
            print(f"step {log.step + 1}: loss {r.total:.4f} (coarse {r.loss_glo:.4f}, "
                  f"fine {r.loss_loc:.4f})", flush=True)

    logs = train_tiny(model, scenes, args.iters, p=cfg.p_train, batch_size=args.batch_size,
                      lam=cfg.lam, seed=args.seed, schedule=args.schedule,
                      augment_pairs=args.augment, callback=report)
    save_checkpoint(model, args.out)
    stats = {"iters": args.iters, "final_loss": logs[-1].report.total if logs else None,
             "n_params": model.n_params}
    write_run_manifest(manifest_path(args, args.out), "train-tiny", args,
                       {**cfg.to_dict(), "lr": args.lr, "momentum": args.momentum,
                        "width": args.width, "batch_size": args.batch_size,
                        "schedule": args.schedule, "augment": args.augment},
                       {"data": args.data}, {"checkpoint": args.out}, stats, t0)
    return EXIT_OK


def _paired(pred_dir, gt_dir) -> list[tuple[Path, Path]]:
    gts = png_files(require_dir(gt_dir))
    pred_dir = require_dir(pred_dir)
    missing = [g.name for g in gts if not (pred_dir / g.name).is_file()]
    if missing:
        raise UsageError(f"{len(missing)} predictions missing from {pred_dir}, e.g. {missing[0]}")
    return [(pred_dir / g.name, g) for g in gts]


def cmd_eval_seg(args, t0) -> int:
    pairs = _paired(args.pred_dir, args.gt_dir)
    records = []
    for pred, gt in pairs:
        p, g = read_mask(pred), read_mask(gt)
        if p.shape != g.shape:
            raise UsageError(f"{pred.name}: prediction {p.shape} vs ground truth {g.shape}")
        records.append((pred.name, confusion(p, g), g.shape))
    rep = segmentation_report(records)
    write_report(args.report, rep)
    s = rep["summary"]["all"]
    print(f"IoU {s['iou']:.4f}  F1 {s['f1']:.4f}  precision {s['precision']:.4f}  "
          f"recall {s['recall']:.4f}  ({len(records)} images)")
    write_run_manifest(manifest_path(args, args.report), "eval-seg", args, None,
                       {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir},
                       {"report": args.report}, rep["summary"], t0)
    return EXIT_OK


def cmd_eval_inpaint(args, t0) -> int:
    pairs = _paired(args.pred_dir, args.gt_dir)
    records = []
    for pred, gt in pairs:
        a, b = read_image(pred), read_image(gt)
        if a.shape != b.shape:
            raise UsageError(f"{pred.name}: prediction {a.shape} vs ground truth {b.shape}")
        records.append((pred.name, psnr(a, b)))
    rep = inpainting_report(records)
    write_report(args.report, rep)
    print(f"PSNR {rep['summary']['all']['psnr']:.2f} dB ({len(records)} images)")
    write_run_manifest(manifest_path(args, args.report), "eval-inpaint", args, None,
                       {"pred_dir": args.pred_dir, "gt_dir": args.gt_dir},
                       {"report": args.report}, rep["summary"], t0)
    return EXIT_OK


def cmd_profile(args, t0) -> int:
    cfg = build_config(args)
    try:
        alphas = [float(a) for a in args.alphas.split(",") if a.strip()]
    except ValueError:
        raise UsageError(f"bad --alphas list {args.alphas!r}") from None
    for a in alphas:
        PipelineConfig.from_mapping({**cfg.to_dict(), "alpha": a})
    files = png_files(require_dir(args.images))
    imgs = [read_image(f)[:, :, :3] for f in files]
    if args.model.startswith("oracle:"):
        # one ground-truth mask per image, matched by file name
        mask_dir = require_dir(args.model[len("oracle:"):])
        model = [load_model(f"oracle:{mask_dir / f.name}", im.shape[:2])
                 for f, im in zip(files, imgs)]
    else:
        model = load_model(args.model)
    rows = profile(imgs, model, cfg, alphas, args.threads_resolved)
    print(f"{'alpha':>8} {'avg_s':>8} {'min_s':>8} {'max_s':>8} {'refined':>8} {'total':>8}")
    for r in rows:
        print(f"{r.alpha:>8g} {r.avg_s:>8.3f} {r.min_s:>8.3f} {r.max_s:>8.3f} "
              f"{r.windows_refined:>8d} {r.windows_total:>8d}")
    table = [r.__dict__ for r in rows]
    outputs = {}
    if args.report:
        atomic_write_bytes(args.report, (json.dumps(table, indent=2) + "\n").encode())
        outputs["report"] = args.report
    target = args.report or Path(args.images) / "profile"
    write_run_manifest(args.manifest or Path(str(target) + ".run.json"), "profile", args,
                       cfg.to_dict(), {"images": args.images, "model": args.model},
                       outputs, {"rows": table}, t0)
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser, config: bool = True) -> None:
    if config:
        p.add_argument("--config", help="JSON file of pipeline settings (flags override it)")
    p.add_argument("--threads", help=f"worker threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--manifest", help="where to write the run manifest JSON")


def _pipeline_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--alpha", type=float, help="minimum coarse wire fraction to refine a window")
    p.add_argument("--patch", type=int, help="coarse input size and fine window size")
    p.add_argument("--stride", type=int, help="window stride (default: patch)")
    p.add_argument("--kernel", type=int, help="min/max luminance filter size")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="wirepipe", description="Segment thin wires in high-resolution images and remove them.",
        epilog="exit codes: 0 success, 2 usage or validation error, 3 runtime failure")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("segment", help="predict a wire mask for one image")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True, help="checkpoint path or oracle:<mask.png>")
    p.add_argument("--out-mask", required=True)
    p.add_argument("--out-prob", help="optional PFM of [background, wire] probabilities")
    _pipeline_flags(p)
    _common(p)
    p.set_defaults(func=cmd_segment)

    p = sub.add_parser("remove", help="segment wires and inpaint them away")
    p.add_argument("--image", required=True)
    p.add_argument("--model", required=True, help="checkpoint path or oracle:<mask.png>")
    p.add_argument("--out", required=True)
    p.add_argument("--out-mask")
    p.add_argument("--clean", help="clean plate; PSNR before and after is reported")
    p.add_argument("--tile", type=int)
    p.add_argument("--overlap", type=int)
    p.add_argument("--onion-d", type=int)
    p.add_argument("--iters", type=int, default=5000, help="diffusion fill iteration cap")
    _pipeline_flags(p)
    _common(p)
    p.set_defaults(func=cmd_remove)

    p = sub.add_parser("gen-synth", help="render a synthetic wire dataset")
    p.add_argument("--count", type=int, required=True)
    p.add_argument("--size", type=int, default=512)
    p.add_argument("--wires", type=int, default=2)
    p.add_argument("--out-dir", required=True)
    p.add_argument("--seed", type=int, default=0)
    _common(p, config=False)
    p.set_defaults(func=cmd_gen_synth)

    p = sub.add_parser("train-tiny", help="train the small two-branch segmenter")
    p.add_argument("--data", required=True, help="dataset directory or its manifest.jsonl")
    p.add_argument("--iters", type=int, required=True)
    p.add_argument("--lr", type=float, default=0.01)
    p.add_argument("--momentum", type=float, default=0.9)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--width", type=int, default=16)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--p-train", type=int, help="training patch size")
    p.add_argument("--schedule", choices=("constant", "poly"), default="constant")
    p.add_argument("--augment", action="store_true")
    p.add_argument("--log-every", type=int, default=100)
    _common(p)
    p.set_defaults(func=cmd_train_tiny)

    for name, func, what in (("eval-seg", cmd_eval_seg, "masks"),
                             ("eval-inpaint", cmd_eval_inpaint, "images")):
        p = sub.add_parser(name, help=f"score predicted {what} against ground truth")
        p.add_argument("--pred-dir", required=True)
        p.add_argument("--gt-dir", required=True)
        p.add_argument("--report", required=True, help=".json or .csv")
        _common(p, config=False)
        p.set_defaults(func=func)

    p = sub.add_parser("profile", help="time segmentation over an alpha sweep")
    p.add_argument("--images", required=True, help="directory of PNG images")
    p.add_argument("--model", required=True, help="checkpoint path or oracle:<mask dir>")
    p.add_argument("--alphas", default="0,0.01,0.02,0.05,0.1")
    p.add_argument("--report", help="optional JSON table")
    _pipeline_flags(p)
    _common(p)
    p.set_defaults(func=cmd_profile)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    t0 = time.perf_counter()
    try:
        args.threads_resolved = resolve_threads(args.threads)
        return args.func(args, t0)
    except (UsageError, InvalidInputError) as exc:
        print(f"wirepipe {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except Exception as exc:
        print(f"wirepipe {args.command}: failed: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
