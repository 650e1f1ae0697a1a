"""Command-line interface.

Subcommands: render (depth views of a cloud), gradcheck (finite-difference
verification of analytic gradients), pretrain (the full training loop),
embed (modal embeddings from a checkpoint), metrics (reconstruction
metrics between two clouds), synth (write a synthetic dataset).

Exit codes: 0 success, 1 a verification/check failed, 2 usage or input
validation error. `DRPOINT_THREADS` caps worker parallelism for dataset
construction and per-view rendering; outputs never depend on it.
"""

from __future__ import annotations

import argparse
import json
import os
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

from . import data as dt
from . import trainer as tr
from .errors import DomainError, FormatError, ParseError
from .geometry import PointCloud, RenderConfig, generate_camera_poses, normalize_cloud
from .losses import chamfer, fscore
from .renderer import DepthImage, render, write_depth_f32

FSCORE_THRESHOLD = 0.01  # "@1%" in unit-normalized coordinates


def _threads() -> int:
    raw = os.environ.get("DRPOINT_THREADS", "1")
    try:
        value = int(raw)
    except ValueError:
        raise DomainError(f"DRPOINT_THREADS must be an integer, got {raw!r}") from None
    if value < 1:
        raise DomainError(f"DRPOINT_THREADS must be >= 1, got {value}")
    return value


def _load_config(path: str | None, profile: str) -> tr.TrainConfig:
    base = tr.desk_config() if profile == "desk" else tr.TrainConfig()
    if path is None:
        return base
    p = Path(path)
    if p.suffix == ".toml":
        try:
            import tomllib  # Python >= 3.11
        except ModuleNotFoundError:
            import tomli as tomllib
        try:
            with open(p, "rb") as fh:
                raw = tomllib.load(fh)
        except tomllib.TOMLDecodeError as exc:
            raise ParseError(f"{p}: {exc}") from None
    else:
        try:
            with open(p, "r", encoding="utf-8") as fh:
                raw = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ParseError(f"{p}: {exc.msg}", line=exc.lineno) from None
    return tr.config_from_dict(raw, base=base)


def _parse_size(text: str) -> tuple[int, int]:
    try:
        w, h = text.lower().split("x")
        return int(w), int(h)
    except ValueError:
        raise DomainError(f"--size must look like WxH, got {text!r}") from None


# -- subcommands ------------------------------------------------------------------


def cmd_render(args) -> int:
    cloud = normalize_cloud(dt.load_xyz(args.cloud))
    width, height = _parse_size(args.size) if args.size else (args.grid, args.grid)
    cfg = RenderConfig(grid_depth=args.grid, image_height=height, image_width=width)
    poses = generate_camera_poses(2.0)
    if args.poses == "all":
        indices = list(range(len(poses)))
    else:
        try:
            indices = [int(args.poses)]
        except ValueError:
            raise DomainError(f"--poses must be 'all' or an index, got {args.poses!r}") from None
        if not 0 <= indices[0] < len(poses):
            raise DomainError(f"pose index must lie in [0, {len(poses)})")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    def render_one(t: int) -> None:
        image = render(cloud, poses[t], cfg)
        dt.save_png(image.pixels, out / f"view_{t:02d}.png")
        write_depth_f32(image, out / f"view_{t:02d}.f32")

    workers = _threads()
    if workers > 1 and len(indices) > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            list(pool.map(render_one, indices))
    else:
        for t in indices:
            render_one(t)
    print(f"wrote {2 * len(indices)} files to {out}")
    return 0


def cmd_gradcheck(args) -> int:
    ops = [args.op] if args.op else sorted(tr.CHECKS)
    all_passed = True
    for op in ops:
        report = tr.finite_difference_check(op, seed=args.seed, h=args.h, tolerance=args.tol)
        for line in report.lines():
            print(line)
        all_passed &= report.passed
    print("gradcheck:", "PASS" if all_passed else "FAIL")
    return 0 if all_passed else 1


def cmd_pretrain(args) -> int:
    cfg = _load_config(args.config, args.profile)
    workers = _threads()
    if args.data.startswith("synth:"):
        try:
            count = int(args.data.split(":", 1)[1])
        except ValueError:
            raise DomainError(f"synth count must be an integer, got {args.data!r}") from None
        dataset = dt.build_synth_dataset(count, cfg.seed, workers=workers)
    else:
        dataset = dt.build_manifest_dataset(args.data, cfg.seed, workers=workers)
    state, metrics = tr.pretrain(dataset, cfg, out_dir=args.out)
    print(
        f"pretrained {state.step} steps on {len(dataset)} objects; "
        f"final total loss {metrics[-1]['total']:.4f}; outputs in {args.out}"
    )
    return 0


def cmd_embed(args) -> int:
    state = tr.checkpoint_load(args.checkpoint)
    cloud = dt.load_xyz(args.cloud)
    out = {"g_p": [float(v) for v in tr.embed_cloud(state, cloud)]}
    if args.rgb:
        rgb = dt.load_png(args.rgb)
        if rgb.ndim == 2:
            rgb = np.repeat(rgb[:, :, None], 3, axis=2)
        if rgb.shape[:2] != (dt.RGB_SIZE, dt.RGB_SIZE):
            rgb = dt.resize_bilinear(rgb, dt.RGB_SIZE, dt.RGB_SIZE)
        out["g_r"] = [float(v) for v in tr.embed_rgb(state, rgb)]
    if args.depth_view is not None:
        out["g_d"] = [float(v) for v in tr.embed_depth_view(state, cloud, args.depth_view)]
    print(json.dumps(out))
    return 0


def cmd_metrics(args) -> int:
    pred = dt.load_xyz(args.pred)
    gt = dt.load_xyz(args.gt)
    result = {
        "cd_l1": chamfer(pred, gt, "l1"),
        "cd_l2": chamfer(pred, gt, "l2"),
        "fscore_1pct": fscore(pred, gt, FSCORE_THRESHOLD),
    }
    print(json.dumps(result))
    return 0


def cmd_synth(args) -> int:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    shapes = dt.synth_shapes(args.count, args.seed)
    records = []
    for i, (cloud, label) in enumerate(shapes):
        name = f"synth_{i:04d}"
        dt.save_xyz(cloud, out / f"{name}.xyz")
        records.append({"id": name, "cloud_path": f"{name}.xyz", "label": label})
    with open(out / "manifest.jsonl", "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(rec) + "\n")
    print(f"wrote {len(records)} shapes and manifest.jsonl to {out}")
    return 0


# -- entry point -------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="drpoint", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("render", help="render depth views of a point cloud")
    p.add_argument("--cloud", required=True)
    p.add_argument("--poses", default="all", help="'all' or a pose index 0..31")
    p.add_argument("--out", required=True)
    p.add_argument("--grid", type=int, default=32, help="depth slices (default 32)")
    p.add_argument("--size", default=None, help="image size WxH (default grid x grid)")
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--op", default=None, help=f"one of {sorted(tr.CHECKS)}")
    p.add_argument("--tol", type=float, default=1e-3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--h", type=float, default=1e-4)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("pretrain", help="run tri-modal pre-training")
    p.add_argument("--config", default=None, help="TOML or JSON config file")
    p.add_argument("--profile", choices=("desk", "paper"), default="desk")
    p.add_argument("--data", required=True, help="manifest path or synth:N")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_pretrain)

    p = sub.add_parser("embed", help="emit modal embeddings from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--cloud", required=True)
    p.add_argument("--rgb", default=None)
    p.add_argument("--depth-view", type=int, default=None)
    p.set_defaults(func=cmd_embed)

    p = sub.add_parser("metrics", help="Chamfer and F-score between two clouds")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.set_defaults(func=cmd_metrics)

    p = sub.add_parser("synth", help="write a synthetic shape dataset")
    p.add_argument("--count", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code) if exc.code else 0
    try:
        return args.func(args)
    except (DomainError, ParseError, FormatError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
