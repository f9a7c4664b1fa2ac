"""Batch command-line interface.

Set ENDOMAP_NUM_THREADS to cap the BLAS/OpenMP thread pools before the
numeric stack loads.
"""

import os

_threads = os.environ.get("ENDOMAP_NUM_THREADS")
if _threads:
    for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
        os.environ.setdefault(var, _threads)

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, EndomapError, StageError
from .evaluate import Trajectory, ade_rmse, apply_similarity, ate_rmse, icp_align
from .imgcore import to_grayscale
from .keyframes import select_keyframes
from .pipeline import PipelineConfig, run_ablation, run_pipeline
from .preprocess import preprocess_frame
from .register import Transform2D
from .sfs import LightParams, depth_to_pointcloud, estimate_light_params, tsai_shah_depth
from .synth import (DegradationConfig, bumps_scene, generate_sequence,
                    hemisphere_scene, traj_loop, traj_pan, traj_still)


def _load_frames(indir):
    indir = Path(indir)
    if not indir.is_dir():
        raise EndomapError(f"frame directory not found: {indir}")
    paths = sorted(p for p in indir.iterdir()
                   if p.suffix.lower() in (".png", ".pgm", ".pfm"))
    if not paths:
        raise EndomapError(f"no frames found in {indir}")
    return [fileio.load_image(p) for p in paths], paths


def _load_config(args):
    if getattr(args, "config", None):
        return PipelineConfig.load(args.config)
    return PipelineConfig()


def cmd_synth(args):
    if args.scene == "hemisphere":
        scene = hemisphere_scene(size=args.scene_size, seed=args.seed,
                                 texture_amplitude=args.texture)
    else:
        scene = bumps_scene(size=args.scene_size, seed=args.seed,
                            texture_amplitude=args.texture)
    dims = (args.frame_size, args.frame_size)
    margin = 40.0
    origin = ((args.scene_size - args.frame_size) / 2.0 - margin,
              (args.scene_size - args.frame_size) / 2.0)
    if args.traj == "pan":
        traj = traj_pan(args.frames, origin, step=(args.step, 0.0))
    elif args.traj == "loop":
        traj = traj_loop(args.frames, origin, leg=args.step * args.frames / 4.0)
    else:
        traj = traj_still(args.frames, origin)

    if args.degrade == "full":
        cfg = DegradationConfig(vignette_a2=-0.25, k1=-0.05, specular_count=3,
                                noise_sigma=0.01)
    else:
        cfg = DegradationConfig()
    seq = generate_sequence(scene, traj, cfg, dims=dims, seed=args.seed)

    out = Path(args.out)
    (out / "frames").mkdir(parents=True, exist_ok=True)
    for i, frame in enumerate(seq.frames):
        fileio.save_image(out / "frames" / f"frame_{i:04d}.png", frame)
    fileio.write_tum(out / "gt_traj.txt", seq.timestamps, seq.positions)
    fileio.write_pfm(out / "gt_depth.pfm", seq.depth)
    manifest = {"scene": args.scene, "traj": args.traj, "frames": args.frames,
                "frame_size": args.frame_size, "scene_size": args.scene_size,
                "seed": args.seed, "fps": 30.0,
                "degradations": cfg.to_dict(),
                "intrinsics": seq.intrinsics.to_dict(),
                "light": scene.light.to_dict()}
    with open(out / "scene.json", "w") as fh:
        json.dump(manifest, fh, indent=2)

    # matching pipeline configuration: enable exactly the corrections the
    # generated degradations call for
    pipe = PipelineConfig()
    pipe.seed = args.seed
    ki = seq.intrinsics.to_dict()
    ki["k1"], ki["k2"] = cfg.k1, cfg.k2
    from .preprocess import CameraIntrinsics, PreprocessConfig
    pipe.intrinsics = CameraIntrinsics.from_dict(ki)
    pipe.preprocess = PreprocessConfig(
        enable_reflection_suppression=cfg.specular_count > 0,
        enable_undistort=cfg.k1 != 0.0 or cfg.k2 != 0.0,
        enable_devignette=cfg.vignette_a2 != 0.0 or cfg.vignette_a4 != 0.0)
    pipe.keyframe_threshold = float(np.clip(2.0 * args.step, 6.0, 20.0))
    pipe.save(out / "pipeline_config.json")
    print(f"wrote {len(seq.frames)} frames to {out}")
    return 0


def cmd_preprocess(args):
    config = _load_config(args)
    frames, paths = _load_frames(args.indir)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    for frame, path in zip(frames, paths):
        img, mask, _ = preprocess_frame(frame, config.preprocess, config.intrinsics)
        fileio.save_image(out / f"proc_{path.stem}.png", img)
        fileio.save_image(out / f"mask_{path.stem}.png", mask.astype(np.float64))
    print(f"preprocessed {len(frames)} frames into {out}")
    return 0


def cmd_keyframes(args):
    config = _load_config(args)
    frames, _ = _load_frames(args.indir)
    threshold = args.threshold if args.threshold is not None else config.keyframe_threshold
    window = args.window if args.window is not None else config.keyframe_window
    sel = select_keyframes([to_grayscale(f) for f in frames], threshold, window,
                           config.flow)
    if args.out:
        fileio.write_manifest(args.out, sel.indices)
    print("\n".join(str(i) for i in sel.indices))
    return 0


def cmd_stitch(args):
    from .register import (bundle_adjust, gain_compensate, multiband_blend,
                           register_pair, warp_layers)

    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
    frames, _ = _load_frames(args.indir)
    indices = fileio.read_manifest(args.keyframes)
    gray = [to_grayscale(frames[i]) for i in indices]
    rp = config.register
    pairs = []
    for a in range(len(gray) - 1):
        pairs.append(register_pair(gray[a], gray[a + 1], flow_params=config.flow,
                                   ransac_iters=rp.ransac_iters,
                                   ransac_tol=rp.ransac_tol,
                                   patch_radius=rp.patch_radius, stride=rp.stride,
                                   seed=config.seed + a, src=a, dst=a + 1))
    transforms = bundle_adjust(pairs, len(gray), anchor=0) if len(gray) > 1 \
        else [Transform2D.identity()]
    _, layers = warp_layers(gray, transforms)
    layers = gain_compensate(layers)
    mosaic = multiband_blend(layers, rp.blend_bands)
    fileio.save_image(args.out, mosaic)
    if args.poses:
        fileio.write_poses(args.poses, [t.m for t in transforms])
    print(f"stitched {len(gray)} keyframes -> {args.out}")
    return 0


def cmd_sfs(args):
    config = _load_config(args)
    mosaic = to_grayscale(fileio.load_image(args.input))
    if args.light:
        tilt, slant, albedo = (float(v) for v in args.light.split(","))
        light = LightParams(tilt, slant, albedo)
    elif config.sfs.fixed_params is not None:
        light = config.sfs.fixed_params
    else:
        light = estimate_light_params(mosaic)
    depth = tsai_shah_depth(mosaic, light, config.sfs)
    fileio.write_pfm(args.out, depth.Z)
    if args.cloud:
        fileio.write_ply(args.cloud, depth_to_pointcloud(depth, sample_stride=2))
    print(f"depth written to {args.out} "
          f"(light: tilt={light.tilt:.3f} slant={light.slant:.3f} albedo={light.albedo:.3f})")
    return 0


def cmd_evaluate(args):
    metrics = {"schema_version": 1}
    est = gt = None
    if args.est_traj and args.gt_traj:
        est = Trajectory.load(args.est_traj)
        gt = Trajectory.load(args.gt_traj)
        metrics["ate"] = {"scaled": ate_rmse(est, gt, with_scale=True),
                          "unscaled": ate_rmse(est, gt, with_scale=False)}
    if args.est_cloud and args.gt_cloud:
        cloud = fileio.read_ply(args.est_cloud)
        gt_cloud = fileio.read_ply(args.gt_cloud)
        (s, R, t), icp_res = icp_align(cloud, gt_cloud)
        metrics["ade"] = ade_rmse(apply_similarity(cloud, s, R, t), gt_cloud)
        metrics["icp_residual"] = icp_res
    if len(metrics) == 1:
        raise ConfigError("nothing to evaluate; supply trajectory and/or cloud pairs")
    with open(args.out, "w") as fh:
        json.dump(metrics, fh, indent=2)
    if args.figures and est is not None:
        from . import report
        Path(args.figures).mkdir(parents=True, exist_ok=True)
        report.trajectory_figure(est.positions, gt.positions,
                                 Path(args.figures) / "fig_trajectory.png")
    print(json.dumps(metrics, indent=2))
    return 0


def _gt_args(args):
    gt_traj = Trajectory.load(args.gt_traj) if args.gt_traj else None
    gt_cloud = fileio.read_ply(args.gt_cloud) if args.gt_cloud else None
    return gt_traj, gt_cloud


def cmd_pipeline(args):
    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
    frames, _ = _load_frames(args.indir)
    gt_traj, gt_cloud = _gt_args(args)
    result = run_pipeline(frames, config, out_dir=args.out,
                          gt_trajectory=gt_traj, gt_cloud=gt_cloud)
    print(json.dumps({k: v for k, v in result.metrics.items()
                      if k in ("keyframes", "ate", "ade", "mosaic")}, indent=2))
    print(f"artifacts in {args.out}")
    return 0


def cmd_ablate(args):
    config = _load_config(args)
    if args.seed is not None:
        config.seed = args.seed
    frames, _ = _load_frames(args.indir)
    gt_traj, gt_cloud = _gt_args(args)
    axes = [a.strip().upper() for a in args.axes.split(",") if a.strip()]
    rep = run_ablation(frames, config, axes, gt_trajectory=gt_traj,
                       gt_cloud=gt_cloud, out_dir=args.out)
    print(json.dumps(rep["rows"], indent=2))
    return 0


def build_parser():
    parser = argparse.ArgumentParser(
        prog="endomap",
        description="Mosaic and shaded depth reconstruction from monocular "
                    "image sequences")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic ground-truth sequence")
    p.add_argument("--scene", choices=("hemisphere", "bumps"), default="bumps")
    p.add_argument("--traj", choices=("pan", "loop", "still"), default="pan")
    p.add_argument("--frames", type=int, default=30)
    p.add_argument("--frame-size", type=int, default=200)
    p.add_argument("--scene-size", type=int, default=640)
    p.add_argument("--step", type=float, default=6.0)
    p.add_argument("--texture", type=float, default=0.15)
    p.add_argument("--degrade", choices=("none", "full"), default="none")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("preprocess", help="run the preprocessing stage on a frame dir")
    p.add_argument("--config")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_preprocess)

    p = sub.add_parser("keyframes", help="select keyframes from a frame dir")
    p.add_argument("--config")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--threshold", type=float)
    p.add_argument("--window", type=int)
    p.add_argument("--out")
    p.set_defaults(func=cmd_keyframes)

    p = sub.add_parser("stitch", help="register and blend keyframes into a mosaic")
    p.add_argument("--config")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--keyframes", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--poses")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_stitch)

    p = sub.add_parser("sfs", help="recover depth from a mosaic image")
    p.add_argument("--config")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--cloud")
    p.add_argument("--light", help="tilt,slant,albedo override")
    p.set_defaults(func=cmd_sfs)

    p = sub.add_parser("evaluate", help="trajectory and depth metrics")
    p.add_argument("--est-traj")
    p.add_argument("--gt-traj")
    p.add_argument("--est-cloud")
    p.add_argument("--gt-cloud")
    p.add_argument("--out", required=True)
    p.add_argument("--figures")
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("pipeline", help="run every stage end to end")
    p.add_argument("--config")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--gt-traj")
    p.add_argument("--gt-cloud")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_pipeline)

    p = sub.add_parser("ablate", help="pipeline runs over preprocessing switch combos")
    p.add_argument("--config")
    p.add_argument("--in", dest="indir", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--axes", required=True, help="comma list from RS,RSM,RUD,DV")
    p.add_argument("--gt-traj")
    p.add_argument("--gt-cloud")
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"error [config]: {exc}", file=sys.stderr)
        return 2
    except StageError as exc:
        print(f"error [{exc.stage}]: {exc.cause}", file=sys.stderr)
        return 1
    except EndomapError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (OSError, ValueError) as exc:
        print(f"error [{args.command}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
