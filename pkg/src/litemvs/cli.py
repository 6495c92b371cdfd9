"""Command-line entry points: synth, train, infer, fuse, eval.

Exit codes: 0 on success, 2 on validation failure, 3 on numeric failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio, fusion, metrics, scenes
from .config import FusionConfig, NetworkConfig, VARIANTS, read_config_file
from .geometry import ValidationError, back_project
from .network import DepthNetwork
from .tensor import NumericError, ShapeError
from .training import (
    RMSprop,
    compute_normalization,
    heldout_depth_mae,
    load_model,
    save_model,
    train,
)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_NUMERIC = 3


def _volume_elements(config: NetworkConfig, image_size) -> int:
    h, w = image_size
    channels = config.groups if config.spec.correlation else 32
    return channels * config.num_depths * (h // 4) * (w // 4)


def cmd_synth(args) -> int:
    out = Path(args.out or args.scene_dir)
    specs = scenes.default_specs(args.seed, n_scenes=args.num_scenes, n_views=args.views,
                                 image_size=(args.image_size, args.image_size))
    for spec in specs:
        scene = scenes.render(spec)
        scenes.write_scene(out / spec.name, scene)
    print(f"synth: wrote {len(specs)} scenes to {out}")
    return EXIT_OK


def _network_config(args) -> NetworkConfig:
    return NetworkConfig(
        num_depths=args.num_depth,
        groups=args.groups,
        learning_rate=args.learning_rate,
        variant=args.variant,
    )


def cmd_train(args) -> int:
    dataset = scenes.load_dataset(args.scene_dir)
    holdout = args.holdout
    train_scenes = dataset[:-holdout] if holdout else dataset
    config = _network_config(args)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    start_iteration = 0
    optimizer = None
    if args.checkpoint:
        model, optimizer, start_iteration = load_model(args.checkpoint)
        print(f"train: resumed from {args.checkpoint} at iteration {start_iteration}")
    else:
        model = DepthNetwork(config, rng=np.random.default_rng(args.seed))
        mean, std = compute_normalization(train_scenes)
        model.set_normalization(mean, std)

    h, w = train_scenes[0].views[0].image.shape[:2]
    elements = _volume_elements(model.config, (h, w))
    print(f"train: variant={model.config.variant} cost-volume elements per sample: {elements}")

    optimizer, history = train(
        model, train_scenes, iterations=args.iterations, seed=args.seed,
        out_dir=out, optimizer=optimizer, start_iteration=start_iteration,
        quiet=args.quiet,
    )
    meta = {
        "variant": model.config.variant,
        "volume_elements": elements,
        "iterations": args.iterations,
        "final_loss": history[-1] if history else None,
        "train_scenes": [s.name for s in train_scenes],
    }
    if holdout:
        held = dataset[-holdout:]
        mae = heldout_depth_mae(model, held)
        meta["heldout_mae"] = mae
        for name, vals in mae.items():
            print(f"train: held-out {name}: mae={vals['mae']:.4f} ({vals['mae_rel_range']:.2%} of range)")
    (out / "train_meta.json").write_text(json.dumps(meta, indent=2))
    print(f"train: checkpoint written to {out / 'model.ckpt'}")
    return EXIT_OK


def cmd_infer(args) -> int:
    dataset = scenes.load_dataset(args.scene_dir)
    model, _, _ = load_model(args.checkpoint)
    out = Path(args.out)
    for scene in dataset:
        scene_out = out / scene.name
        scene_out.mkdir(parents=True, exist_ok=True)
        for ref_idx in range(len(scene.views)):
            order = [ref_idx] + [i for i in range(len(scene.views)) if i != ref_idx]
            views = [scene.views[i] for i in order][: args.views or None]
            result = model.infer(views)
            conf = fusion.confidence_map(result["prob"], result["ordinal"])
            fileio.save_pfm(scene_out / f"depth_{ref_idx:02d}.pfm", result["depth"])
            fileio.save_pfm(scene_out / f"prob_{ref_idx:02d}.pfm", result["prob"].max(axis=0))
            fileio.save_pfm(scene_out / f"conf_{ref_idx:02d}.pfm", conf)
    print(f"infer: wrote depth/prob/conf maps for {len(dataset)} scenes to {out}")
    return EXIT_OK


def _fusion_config(args) -> FusionConfig:
    return FusionConfig(
        prob_threshold=args.prob_thresh,
        depth_tolerance=args.depth_tol,
        reproj_tolerance=args.reproj_tol,
        min_consistent_views=args.min_views,
    )


def cmd_fuse(args) -> int:
    dataset = scenes.load_dataset(args.scene_dir)
    maps_dir = Path(args.maps)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    config = _fusion_config(args)
    for scene in dataset:
        scene_maps = maps_dir / scene.name
        views_q, depths = [], []
        for i, view in enumerate(scene.views):
            depth = fileio.load_pfm(scene_maps / f"depth_{i:02d}.pfm")
            conf = fileio.load_pfm(scene_maps / f"conf_{i:02d}.pfm")
            depths.append(fusion.filter_depth(depth, conf, config.prob_threshold))
            views_q.append(view.scaled(0.25))
        cloud = fusion.fuse(views_q, depths, config)
        fileio.save_ply(out / f"{scene.name}.ply", cloud.xyz, cloud.rgb, ascii_mode=args.ascii)
        print(f"fuse: {scene.name}: {len(cloud)} points")
    return EXIT_OK


def _gt_cloud(scene: scenes.Scene, max_points: int = 60000) -> np.ndarray:
    points = []
    for view, depth in zip(scene.views, scene.gt_depth_quarter):
        view_q = view.scaled(0.25)
        h, w = depth.shape
        ys, xs = np.meshgrid(np.arange(h, dtype=np.float64), np.arange(w, dtype=np.float64),
                             indexing="ij")
        valid = depth > 0
        uv = np.stack([xs[valid], ys[valid]], axis=-1)
        points.append(back_project(uv, depth[valid].astype(np.float64), view_q))
    cloud = np.concatenate(points)
    if len(cloud) > max_points:
        stride = int(np.ceil(len(cloud) / max_points))
        cloud = cloud[::stride]
    return cloud


def cmd_eval(args) -> int:
    dataset = scenes.load_dataset(args.scene_dir)
    maps_dir = Path(args.maps) if args.maps else None
    cloud_dir = Path(args.clouds) if args.clouds else None
    report: dict[str, dict] = {}
    failed = False
    for scene in dataset:
        entry: dict = {}
        gt_points = _gt_cloud(scene)
        if cloud_dir is not None:
            ply_path = cloud_dir / f"{scene.name}.ply"
            if ply_path.exists():
                xyz, _ = fileio.load_ply(ply_path)
                if len(xyz) == 0:
                    entry["cloud"] = {"error": "empty point cloud"}
                    failed = True
                else:
                    threshold = args.threshold or 0.01 * metrics.scene_diagonal(gt_points)
                    entry["cloud"] = metrics.point_cloud_metrics(
                        xyz.astype(np.float64), gt_points, threshold)
        if maps_dir is not None:
            per_view = []
            for i in range(len(scene.views)):
                pfm = maps_dir / scene.name / f"depth_{i:02d}.pfm"
                if pfm.exists():
                    pred = fileio.load_pfm(pfm)
                    per_view.append(metrics.depth_map_metrics(pred, scene.gt_depth_quarter[i]))
            if per_view:
                entry["depth"] = {
                    k: float(np.mean([v[k] for v in per_view])) for k in per_view[0]
                }
        report[scene.name] = entry
    out = Path(args.out) if args.out else None
    text = json.dumps(report, indent=2)
    if out:
        out.parent.mkdir(parents=True, exist_ok=True)
        out.write_text(text)
    print(text)
    if failed:
        print("eval: FAILURE (empty cloud)", file=sys.stderr)
        return EXIT_NUMERIC
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="litemvs", description=__doc__)
    parser.add_argument("--config", help="flat key=value config file; CLI flags override it")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--scene-dir", required=True)
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--out", default=None)

    p_synth = sub.add_parser("synth", help="generate a synthetic scene dataset")
    common(p_synth)
    p_synth.add_argument("--num-scenes", type=int, default=20)
    p_synth.add_argument("--views", type=int, default=5)
    p_synth.add_argument("--image-size", type=int, default=64)
    p_synth.set_defaults(func=cmd_synth)

    p_train = sub.add_parser("train", help="train a model on a scene dataset")
    common(p_train)
    p_train.add_argument("--checkpoint", default=None, help="resume from this checkpoint")
    p_train.add_argument("--variant", choices=sorted(VARIANTS), default="cider")
    p_train.add_argument("--num-depth", type=int, default=32)
    p_train.add_argument("--groups", type=int, default=8)
    p_train.add_argument("--iterations", type=int, default=2000)
    p_train.add_argument("--learning-rate", type=float, default=1e-3)
    p_train.add_argument("--holdout", type=int, default=0,
                         help="exclude the last K scenes from training")
    p_train.add_argument("--quiet", action="store_true")
    p_train.set_defaults(func=cmd_train)

    p_infer = sub.add_parser("infer", help="write depth/prob/conf maps per view")
    common(p_infer)
    p_infer.add_argument("--checkpoint", required=True)
    p_infer.add_argument("--views", type=int, default=0, help="limit views per reference (0 = all)")
    p_infer.set_defaults(func=cmd_infer)

    p_fuse = sub.add_parser("fuse", help="fuse inferred depth maps into PLY clouds")
    common(p_fuse)
    p_fuse.add_argument("--maps", required=True, help="directory written by infer")
    p_fuse.add_argument("--prob-thresh", type=float, default=0.8)
    p_fuse.add_argument("--depth-tol", type=float, default=0.01)
    p_fuse.add_argument("--reproj-tol", type=float, default=1.0)
    p_fuse.add_argument("--min-views", type=int, default=3)
    p_fuse.add_argument("--ascii", action="store_true", help="write ASCII PLY")
    p_fuse.set_defaults(func=cmd_fuse)

    p_eval = sub.add_parser("eval", help="score clouds and depth maps against GT")
    common(p_eval)
    p_eval.add_argument("--maps", default=None, help="directory written by infer")
    p_eval.add_argument("--clouds", default=None, help="directory written by fuse")
    p_eval.add_argument("--threshold", type=float, default=0.0,
                        help="percentage-metric distance threshold (default: 1%% of scene diagonal)")
    p_eval.set_defaults(func=cmd_eval)
    return parser


def _apply_config_file(parser, argv):
    """Let a key=value config file supply defaults that flags can override."""
    ns, _ = parser.parse_known_args(argv)
    if not getattr(ns, "config", None):
        return argv
    values = read_config_file(ns.config)
    extra = []
    for key, value in values.items():
        extra.append(f"--{key.replace('_', '-')}")
        if value.lower() != "true":
            extra.append(value)
    # insert right after the subcommand so explicit flags (later) win
    commands = {"synth", "train", "infer", "fuse", "eval"}
    pos = next((i for i, tok in enumerate(argv) if tok in commands), len(argv) - 1)
    return argv[: pos + 1] + extra + argv[pos + 1:]


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if "--config" in argv:
            argv = _apply_config_file(parser, argv)
        args = parser.parse_args(argv)
        return args.func(args)
    except (ValidationError, ShapeError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except NumericError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
