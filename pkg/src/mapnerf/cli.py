"""Command-line interface: gen-scene, train, render, eval, ablate."""

from __future__ import annotations

import argparse
import dataclasses
import logging
import sys
from pathlib import Path

import numpy as np

from . import dataio
from .dataio import FormatError

log = logging.getLogger("mapnerf")


def _resolve_dataset(path, sub: str) -> Path:
    """Accept either a dataset directory or a gen-scene root containing ``sub``."""
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"dataset path not found: {p}")
    if (p / sub / "poses.txt").is_file():
        return p / sub
    return p


def _train_config(path, args=None):
    from .trainer import TrainConfig

    cfg = dataio.parse_config(path, TrainConfig) if path else TrainConfig()
    if args is not None:
        changes = {}
        if getattr(args, "no_gd", False):
            changes["use_gd"] = False
        if getattr(args, "no_view", False):
            changes["use_v"] = False
        if getattr(args, "no_temper", False):
            changes["use_temper"] = False
        if getattr(args, "seed", None) is not None:
            changes["seed"] = args.seed
        cfg = dataclasses.replace(cfg, **changes)
    return cfg.validate()


def cmd_gen_scene(args) -> int:
    from .scene import SceneConfig, build_scene_datasets

    cfg = dataio.parse_config(args.config, SceneConfig) if args.config else SceneConfig()
    paths = build_scene_datasets(cfg, args.seed, args.out)
    for name, p in paths.items():
        print(f"{name}: {p}")
    return 0


def cmd_train(args) -> int:
    from .trainer import checkpoint_to_field, train

    cfg = _train_config(args.config, args)
    ds = dataio.load_dataset(_resolve_dataset(args.dataset, "train"))
    resume = None
    if args.resume:
        resume = checkpoint_to_field(dataio.load_checkpoint(args.resume))
    field, state, metrics = train(cfg, ds, out_dir=args.out, resume=resume, stop_after=args.stop_after)
    last = metrics[-1] if metrics else None
    if last is not None:
        print(f"trained to step {state.step}: loss {last.loss_total:.6f}, epsilon {state.epsilon:.6f}")
    print(f"checkpoint: {Path(args.out) / 'checkpoint.mnrf'}")
    return 0


def _read_poses(path):
    p = Path(path)
    ids, poses = [], []
    for n, ln in enumerate(dataio._text_lines(p), 1):
        tok = ln.split()
        if not tok:
            continue
        if len(tok) != 13:
            raise FormatError(p, "expected frame id and 12 numbers", line=n)
        ids.append(int(tok[0]))
        poses.append(np.array(dataio._floats(p, n, tok[1:])).reshape(3, 4))
    return ids, poses


def cmd_render(args) -> int:
    from .field import render_image
    from .geometry import Camera
    from .trainer import checkpoint_to_field

    field, _ = checkpoint_to_field(dataio.load_checkpoint(args.ckpt))
    intr_path = Path(args.intrinsics) if args.intrinsics else Path(args.poses).parent / "intrinsics.txt"
    lines = [ln for ln in dataio._text_lines(intr_path) if ln.strip()]
    if len(lines) != 1 or len(lines[0].split()) != 6:
        raise FormatError(intr_path, "expected 'fx fy cx cy width height'", line=1)
    fx, fy, cx, cy, w, h = dataio._floats(intr_path, 1, lines[0].split())
    ids, poses = _read_poses(args.poses)
    out = Path(args.out)
    if not out.parent.is_dir():
        raise FileNotFoundError(f"output parent directory does not exist: {out.parent}")
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "depth").mkdir(exist_ok=True)
    for fid, pose in zip(ids, poses):
        cam = Camera(fx, fy, cx, cy, int(w), int(h), pose)
        img, depth = render_image(field, cam, args.n_samples)
        dataio.write_ppm(out / "images" / f"{fid:06d}.ppm", np.round(np.clip(img, 0, 1) * 255).astype(np.uint8))
        dataio.write_pfm(out / "depth" / f"{fid:06d}.pfm", depth)
    print(f"rendered {len(ids)} frames to {out}")
    return 0


def cmd_eval(args) -> int:
    from .eval import eval_extrapolation, eval_interpolation
    from .trainer import checkpoint_to_field

    field, _ = checkpoint_to_field(dataio.load_checkpoint(args.ckpt))
    if args.split == "interp":
        ds = dataio.load_dataset(_resolve_dataset(args.dataset, "train"))
        report = eval_interpolation(field, ds, args.n_samples)
    else:
        ds = dataio.load_dataset(_resolve_dataset(args.dataset, args.holdout))
        train_ids = None
        root_train = Path(args.dataset) / "train"
        if (root_train / "split.txt").is_file():
            train_ids = dataio.load_dataset(root_train).train_ids
        report = eval_extrapolation(field, ds, train_ids, args.n_samples)
    report.write(args.report)
    print(f"{report.protocol}: {len(report)} frames, PSNR {report.mean_psnr:.3f} dB, SSIM {report.mean_ssim:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .eval import ablation_run

    cfg = _train_config(args.config)
    root = Path(args.dataset)
    if not root.exists():
        raise FileNotFoundError(f"dataset path not found: {root}")
    train_ds = dataio.load_dataset(_resolve_dataset(root, "train"))
    extrap_dir = root / args.extrap
    if not extrap_dir.is_dir():
        raise FileNotFoundError(f"extrapolation dataset not found: {extrap_dir}")
    extrap_ds = dataio.load_dataset(extrap_dir)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    results = ablation_run(cfg, train_ds, extrap_ds, args.rows, out_dir=args.out)
    for r in results:
        print(f"({r.label}) gd={int(r.use_gd)} v={int(r.use_v)} ut={int(r.use_temper)}  "
              f"interp {r.interp.mean_psnr:.3f} dB  extrap {r.extrap.mean_psnr:.3f} dB / {r.extrap.mean_ssim:.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="mapnerf", description="Map-prior guided voxel radiance fields. "
                                "Subcommands: gen-scene, train, render, eval, ablate.")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True, metavar="{gen-scene,train,render,eval,ablate}")

    g = sub.add_parser("gen-scene", help="generate a synthetic driving scene dataset")
    g.add_argument("--config", help="scene config (key = value)")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.set_defaults(func=cmd_gen_scene)

    t = sub.add_parser("train", help="train a radiance field")
    t.add_argument("--dataset", required=True)
    t.add_argument("--config", help="train config (key = value)")
    t.add_argument("--out", required=True)
    t.add_argument("--no-gd", action="store_true", help="disable the ground-density term")
    t.add_argument("--no-view", action="store_true", help="disable the view-consistency term")
    t.add_argument("--no-temper", action="store_true", help="disable uncertainty tempering")
    t.add_argument("--seed", type=int)
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("--stop-after", type=int, help="stop once this step count is reached")
    t.set_defaults(func=cmd_train)

    r = sub.add_parser("render", help="render poses from a checkpoint")
    r.add_argument("--ckpt", required=True)
    r.add_argument("--poses", required=True, help="poses.txt-format file")
    r.add_argument("--intrinsics", help="intrinsics.txt (default: next to the poses file)")
    r.add_argument("--out", required=True)
    r.add_argument("--n-samples", type=int, default=128)
    r.set_defaults(func=cmd_render)

    e = sub.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--ckpt", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--split", choices=("interp", "extrap"), required=True)
    e.add_argument("--report", required=True)
    e.add_argument("--holdout", choices=("parallel", "lane_change"), default="parallel",
                   help="extrapolation sub-dataset when --dataset is a gen-scene root")
    e.add_argument("--n-samples", type=int, default=128)
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="run the loss ablation grid")
    a.add_argument("--dataset", required=True, help="gen-scene output root")
    a.add_argument("--config", help="base train config (key = value)")
    a.add_argument("--out", required=True)
    a.add_argument("--rows", default="abcdefg")
    a.add_argument("--extrap", default="parallel", help="holdout sub-dataset (parallel or lane_change)")
    a.set_defaults(func=cmd_ablate)
    return p


def cli_dispatch(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        return args.func(args)
    except (FileNotFoundError, FormatError, ValueError, FloatingPointError) as exc:
        print(f"mapnerf {args.command}: error: {exc}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli_dispatch())
