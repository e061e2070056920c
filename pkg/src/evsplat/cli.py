"""Command-line surface: synth, edi, train, render, eval, inspect."""

from __future__ import annotations

import argparse
import json
import math
import sys
from pathlib import Path

import numpy as np

from . import dataset as ds
from .edi import EdiRequest, edi_deblur
from .events import read_events
from .geometry import ExposureTrajectory, Pose, rotation_geodesic_angle
from .image import RadianceImage, read_pfm, read_png, write_pfm, write_png
from .losses import l1
from .renderer import render
from .scene import Scene
from .trainer import TrainConfig, evaluate, train


def _read_image(path) -> RadianceImage:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        return read_pfm(path)
    return read_png(path)


def _write_image(path, img: RadianceImage) -> None:
    path = Path(path)
    if path.suffix.lower() == ".pfm":
        write_pfm(path, img)
    else:
        write_png(path, img)


def read_config_file(path) -> dict:
    """Flat key-value config: one `key = value` per line, # comments."""
    values = {}
    with open(path) as f:
        for lineno, line in enumerate(f, 1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            if "=" not in line:
                raise ValueError(f"{path}:{lineno}: expected 'key = value'")
            key, raw = (part.strip() for part in line.split("=", 1))
            try:
                values[key] = json.loads(raw)
            except json.JSONDecodeError:
                values[key] = raw
    return values


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    scene_spec = ds.SceneSpec(gaussians=args.gaussians,
                              sh_degree=args.sh_degree,
                              scene_path=args.scene)
    traj_spec = ds.TrajectorySpec(exposure=args.exposure,
                                  shake_rot_deg=args.shake_rot,
                                  shake_trans_frac=args.shake_trans,
                                  init_rot_noise_deg=args.init_rot_noise,
                                  init_trans_noise_frac=args.init_trans_noise)
    camera_spec = ds.CameraSpec(width=args.width, height=args.height,
                                fov_deg=args.fov)
    cfg = ds.SynthConfig(views=args.views, eval_views=args.eval_views,
                         seed=args.seed, n_frames=args.frames,
                         theta=args.theta, store_latents=args.store_latents)
    dataset = ds.synth_dataset(scene_spec, traj_spec, camera_spec, cfg, args.out)
    print(f"wrote {len(dataset.observations)} observations and "
          f"{len(dataset.eval_views)} eval views to {args.out}")
    return 0


def cmd_edi(args) -> int:
    blurred = _read_image(args.blur)
    events = read_events(args.events)
    t_ref = 0.5 * (args.t_start + args.t_end) if args.t_ref == "mid" \
        else float(args.t_ref)
    req = EdiRequest(blurred=blurred, events=events, t_start=args.t_start,
                     t_end=args.t_end, t_ref=t_ref, theta=args.theta,
                     bins=args.bins)
    _write_image(args.out, edi_deblur(req))
    print(f"wrote {args.out}")
    return 0


def cmd_train(args) -> int:
    dataset = ds.load_dataset(args.data)
    overrides = read_config_file(args.config) if args.config else {}
    for name in ("iterations", "rng_seed", "n_latent", "lambda_blur",
                 "lambda_ev", "lambda_edi", "lambda_ssim", "pose_warmup"):
        cli_val = getattr(args, _argname(name), None)
        if cli_val is not None:
            overrides[name] = cli_val
    config = TrainConfig(**overrides)
    scene, trajectories, log = train(dataset.init_scene, dataset, config,
                                     out_dir=args.out,
                                     resume_from=args.resume)
    from .report import write_loss_curves
    write_loss_curves(args.out, log)
    if log:
        print(f"trained {len(log)} iterations; final total loss "
              f"{log[-1]['total']:.6f}")
    else:
        print("trained 0 iterations; checkpoint echoes the initialization")
    print(f"checkpoints under {Path(args.out) / 'checkpoints'}")
    return 0


def _argname(config_field: str) -> str:
    return {"iterations": "iters", "rng_seed": "seed"}.get(config_field,
                                                           config_field)


def cmd_render(args) -> int:
    scene = Scene.load(Path(args.checkpoint) / "scene.json")
    dataset = ds.load_dataset(args.data)
    if args.pose is not None:
        with open(args.pose) as f:
            pose = Pose.from_json(json.load(f))
    elif args.eval_view is not None:
        pose = dataset.eval_views[args.eval_view][0]
    else:
        print("render: need --pose FILE or --eval-view N", file=sys.stderr)
        return 2
    _write_image(args.out, render(scene, pose, dataset.intrinsics))
    print(f"wrote {args.out}")
    return 0


def cmd_eval(args) -> int:
    dataset = ds.load_dataset(args.data)
    scene = Scene.load(Path(args.checkpoint) / "scene.json")
    result = evaluate(scene, dataset.eval_views, dataset.intrinsics)

    traj_path = Path(args.checkpoint) / "trajectories.json"
    if dataset.gt_trajectories is not None and traj_path.exists():
        from .trainer import pose_error
        with open(traj_path) as f:
            trained = [ExposureTrajectory.from_json(d) for d in json.load(f)]
        errs = [pose_error(est, gt)
                for est, gt in zip(trained, dataset.gt_trajectories)]
        result["mean_pose_rot_deg"] = float(np.mean([e[0] for e in errs]))
        result["mean_pose_trans"] = float(np.mean([e[1] for e in errs]))

    print(f"{'view':>6} {'PSNR [dB]':>10} {'SSIM':>8}")
    for row in result["views"]:
        print(f"{row['view']:>6} {row['psnr']:>10.3f} {row['ssim']:>8.4f}")
    print(f"{'mean':>6} {result['mean_psnr']:>10.3f} {result['mean_ssim']:>8.4f}")
    if "mean_pose_rot_deg" in result:
        print(f"pose error: {result['mean_pose_rot_deg']:.4f} deg / "
              f"{result['mean_pose_trans']:.6f} m")
    if args.out:
        from .report import write_metrics_report
        paths = write_metrics_report(args.out, result)
        print(f"report written to {paths['json']}, {paths['csv']}, "
              f"{paths['figure']}")
    return 0


def cmd_inspect(args) -> int:
    dataset = ds.load_dataset(args.data)
    stats = []
    for i, obs in enumerate(dataset.observations):
        entry = dataset.manifest.observations[i]
        row = {"view": i, "events": len(obs.events),
               "pos_events": int(np.sum(obs.events.p > 0)),
               "neg_events": int(np.sum(obs.events.p < 0))}
        sharp_rel = entry.get("sharp_gt")
        if sharp_rel and (dataset.root / sharp_rel).exists():
            sharp = read_pfm(dataset.root / sharp_rel)
            row["blur_l1"] = l1(obs.blurred, sharp)
        else:
            row["blur_l1"] = math.nan
        traj = obs.trajectory
        row["traj_rot_deg"] = math.degrees(
            rotation_geodesic_angle(traj.pose_start, traj.pose_end))
        row["traj_trans"] = float(np.linalg.norm(traj.pose_end.t
                                                 - traj.pose_start.t))
        stats.append(row)

    print(f"{'view':>6} {'events':>8} {'+':>7} {'-':>7} {'blur L1':>9} "
          f"{'rot[deg]':>9} {'trans':>8}")
    for row in stats:
        print(f"{row['view']:>6} {row['events']:>8} {row['pos_events']:>7} "
              f"{row['neg_events']:>7} {row['blur_l1']:>9.4f} "
              f"{row['traj_rot_deg']:>9.3f} {row['traj_trans']:>8.4f}")
    if args.out:
        from .report import write_inspect_report
        paths = write_inspect_report(args.out, stats)
        print(f"report written to {paths['csv']}, {paths['figure']}")
    return 0


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evsplat",
        description="Event-assisted deblurring for Gaussian-splat scenes")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--views", type=int, default=10)
    p.add_argument("--eval-views", type=int, default=4)
    p.add_argument("--width", type=int, default=64)
    p.add_argument("--height", type=int, default=64)
    p.add_argument("--fov", type=float, default=50.0)
    p.add_argument("--gaussians", type=int, default=200)
    p.add_argument("--sh-degree", type=int, default=1)
    p.add_argument("--scene", default=None, help="scene JSON instead of random")
    p.add_argument("--exposure", type=float, default=0.1)
    p.add_argument("--shake-rot", type=float, default=2.0,
                   help="exposure rotation sweep [deg]")
    p.add_argument("--shake-trans", type=float, default=0.02,
                   help="exposure translation sweep, fraction of scene extent")
    p.add_argument("--init-rot-noise", type=float, default=1.0)
    p.add_argument("--init-trans-noise", type=float, default=0.01)
    p.add_argument("--frames", type=int, default=51)
    p.add_argument("--theta", type=float, default=0.2)
    p.add_argument("--store-latents", action="store_true")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("edi", help="event-based double integral deblur")
    p.add_argument("--blur", required=True)
    p.add_argument("--events", required=True)
    p.add_argument("--t-start", type=float, required=True)
    p.add_argument("--t-end", type=float, required=True)
    p.add_argument("--t-ref", default="mid")
    p.add_argument("--theta", type=float, default=0.2)
    p.add_argument("--bins", type=int, default=32)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_edi)

    p = sub.add_parser("train", help="run the joint optimization")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--n-latent", dest="n_latent", type=int, default=None)
    p.add_argument("--lambda-blur", dest="lambda_blur", type=float, default=None)
    p.add_argument("--lambda-ev", dest="lambda_ev", type=float, default=None)
    p.add_argument("--lambda-edi", dest="lambda_edi", type=float, default=None)
    p.add_argument("--lambda-ssim", dest="lambda_ssim", type=float, default=None)
    p.add_argument("--pose-warmup", dest="pose_warmup", type=int, default=None)
    p.add_argument("--config", default=None, help="flat key = value file")
    p.add_argument("--resume", default=None, help="checkpoint directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("render", help="sharp novel view from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset (for intrinsics)")
    p.add_argument("--pose", default=None, help="pose JSON file")
    p.add_argument("--eval-view", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("eval", help="metrics against the eval views")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report directory")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("inspect", help="dataset statistics")
    p.add_argument("--data", required=True)
    p.add_argument("--out", default=None, help="report directory")
    p.set_defaults(func=cmd_inspect)
    return parser


def cli(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code) if e.code is not None else 0
    try:
        return args.func(args)
    except (ValueError, OSError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


def main() -> None:
    sys.exit(cli())


if __name__ == "__main__":
    main()
