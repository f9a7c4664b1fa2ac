"""End-to-end orchestration: preprocess, keyframe selection, pairwise and
joint registration, compositing, depth recovery, metric export.

Reflection suppression can be scoped to both pose estimation and map
building or to the map only; in the latter case pose estimation consumes
non-suppressed frames while blending and depth recovery consume the
suppressed ones.
"""

import itertools
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import fileio
from .errors import ConfigError, StageError
from .evaluate import Trajectory, ade_rmse, apply_similarity, ate_rmse, icp_align
from .flow import FlowParams
from .imgcore import nearest_valid_fill, to_grayscale
from .keyframes import select_keyframes
from .preprocess import CameraIntrinsics, PreprocessConfig, preprocess_frame
from .register import (Correspondences, PatchWeights, Transform2D,
                       bundle_adjust, gain_compensate, gauss_newton_affine,
                       multiband_blend, register_pair, transfer_error,
                       warp_layers)
from .sfs import (SfsConfig, depth_to_pointcloud, estimate_light_params,
                  shading_residual, tsai_shah_depth)

METRICS_SCHEMA_VERSION = 1


@dataclass
class RegisterParams:
    ransac_iters: int = 500
    ransac_tol: float = 2.0
    patch_radius: float = 15.0
    stride: int = 8
    gn_max_iters: int = 100
    gn_tol: float = 1e-9
    gn_rel_tol: float = 1e-6
    blend_bands: int = 5
    overlap_threshold: float = 0.25

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("ransac_iters", "ransac_tol", "patch_radius", "stride",
                 "gn_max_iters", "gn_tol", "gn_rel_tol", "blend_bands",
                 "overlap_threshold")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class PipelineConfig:
    seed: int = 0
    intrinsics: CameraIntrinsics = None
    preprocess: PreprocessConfig = field(default_factory=PreprocessConfig)
    reflection_scope: str = "both"          # "both" or "map_only"
    keyframe_threshold: float = 20.0
    keyframe_window: int = 15
    flow: FlowParams = field(default_factory=FlowParams)
    register: RegisterParams = field(default_factory=RegisterParams)
    sfs: SfsConfig = field(default_factory=SfsConfig)

    def validate(self):
        if self.reflection_scope not in ("both", "map_only"):
            raise ConfigError(f"unknown reflection scope {self.reflection_scope!r}")
        if self.preprocess.enable_undistort and self.intrinsics is None:
            raise ConfigError("undistortion enabled but no intrinsics configured")
        if self.keyframe_threshold <= 0 or self.keyframe_window < 1:
            raise ConfigError("keyframe threshold/window must be positive")
        return self

    def to_dict(self):
        return {"seed": self.seed,
                "intrinsics": self.intrinsics.to_dict() if self.intrinsics else None,
                "preprocess": self.preprocess.to_dict(),
                "reflection_scope": self.reflection_scope,
                "keyframes": {"threshold": self.keyframe_threshold,
                              "fallback_window": self.keyframe_window},
                "flow": self.flow.to_dict(),
                "register": self.register.to_dict(),
                "sfs": self.sfs.to_dict()}

    @classmethod
    def from_dict(cls, d):
        cfg = cls()
        cfg.seed = int(d.get("seed", 0))
        if d.get("intrinsics"):
            cfg.intrinsics = CameraIntrinsics.from_dict(d["intrinsics"])
        if "preprocess" in d:
            cfg.preprocess = PreprocessConfig.from_dict(d["preprocess"])
        cfg.reflection_scope = d.get("reflection_scope", "both")
        kf = d.get("keyframes", {})
        cfg.keyframe_threshold = float(kf.get("threshold", 20.0))
        cfg.keyframe_window = int(kf.get("fallback_window", 15))
        if "flow" in d:
            cfg.flow = FlowParams.from_dict(d["flow"])
        if "register" in d:
            cfg.register = RegisterParams.from_dict(d["register"])
        if "sfs" in d:
            cfg.sfs = SfsConfig.from_dict(d["sfs"])
        return cfg.validate()

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path):
        with open(path, "w") as fh:
            json.dump(self.to_dict(), fh, indent=2)


@dataclass
class PipelineResult:
    mosaic: np.ndarray
    mosaic_valid: np.ndarray
    depth: object
    cloud: np.ndarray
    keyframes: list
    transforms: list                 # per-keyframe global transforms (anchor frame)
    canvas_transforms: list          # per-keyframe canvas-space transforms
    metrics: dict


def _stage(timings, name):
    class _Timer:
        def __enter__(self):
            self.t0 = time.perf_counter()
            return self

        def __exit__(self, exc_type, exc, tb):
            timings[name] = round((time.perf_counter() - self.t0) * 1000.0, 3)
            if exc is not None and not isinstance(exc, StageError):
                raise StageError(name, exc) from exc
            return False
    return _Timer()


def _overlap_fraction(shape, rel):
    """Fraction of a frame's area landing inside another frame under rel."""
    h, w = shape[:2]
    ys = np.linspace(0, h - 1, 12)
    xs = np.linspace(0, w - 1, 12)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = rel.apply(np.c_[gx.ravel(), gy.ravel()])
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= w - 1) &
              (pts[:, 1] >= 0) & (pts[:, 1] <= h - 1))
    return float(inside.mean())


def _loop_closure_pair(I1, I2, rel_init, params, src, dst,
                       valid1=None, valid2=None):
    """Refine a predicted relative transform photometrically (no fresh flow);
    used for non-consecutive keyframe pairs with enough predicted overlap."""
    h, w = I1.shape[:2]
    ys = np.linspace(5, h - 6, 8)
    xs = np.linspace(5, w - 6, 8)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    pts = np.c_[gx.ravel(), gy.ravel()]
    keep = np.ones(len(pts), dtype=bool)
    if valid1 is not None:
        keep &= valid1[pts[:, 1].astype(int), pts[:, 0].astype(int)]
    tpts = rel_init.apply(pts)
    keep &= ((tpts[:, 0] >= 0) & (tpts[:, 0] <= w - 1) &
             (tpts[:, 1] >= 0) & (tpts[:, 1] <= h - 1))
    if valid2 is not None:
        cx = np.clip(np.rint(tpts[:, 0]).astype(int), 0, w - 1)
        cy = np.clip(np.rint(tpts[:, 1]).astype(int), 0, h - 1)
        keep &= valid2[cy, cx]
    if keep.sum() < 8:
        return None
    weights = PatchWeights(pts[keep], params.patch_radius)
    init = Transform2D(rel_init.m.copy(), "affine")
    est = gauss_newton_affine(I1, I2, init, weights,
                              max_iters=min(params.gn_max_iters, 30),
                              tol=params.gn_tol,
                              rel_tol=params.gn_rel_tol, src=src, dst=dst)
    if not est.converged:
        return None
    p1 = pts[keep]
    est.inliers = Correspondences(p1, est.transform.apply(p1))
    return est


def run_pipeline(frames, config=None, out_dir=None, timestamps=None,
                 gt_trajectory=None, gt_cloud=None, write_figures=True):
    """Run every stage on an in-memory frame sequence.

    Artifacts (mosaic.png, depth.pfm, cloud.ply, poses.txt, metrics.json and
    report figures) are written when out_dir is given. Ground truth, when
    supplied, adds ATE/ADE metrics.
    """
    config = (config or PipelineConfig()).validate()
    frames = [np.asarray(f, dtype=np.float64) for f in frames]
    if not frames:
        raise StageError("input", ValueError("empty frame sequence"))
    if timestamps is None:
        timestamps = np.arange(len(frames)) / 30.0

    timings = {}
    metrics = {"schema_version": METRICS_SCHEMA_VERSION, "seed": config.seed,
               "n_frames": len(frames)}
    rp = config.register

    with _stage(timings, "preprocess"):
        suppress_map = config.preprocess.enable_reflection_suppression
        suppress_pose = suppress_map and config.reflection_scope == "both"
        map_cfg = config.preprocess
        map_out = [preprocess_frame(f, map_cfg, config.intrinsics) for f in frames]
        map_frames = [to_grayscale(o[0]) for o in map_out]
        spec_masks = [o[1] for o in map_out]
        valid_masks = [o[2] for o in map_out]
        # dead bands would anchor the coarse flow levels at zero motion;
        # pose frames get them filled with replicated content instead
        if suppress_pose == suppress_map:
            pose_frames = [nearest_valid_fill(img, v)
                           for img, v in zip(map_frames, valid_masks)]
        else:
            pose_cfg = PreprocessConfig(
                enable_reflection_suppression=False,
                enable_undistort=map_cfg.enable_undistort,
                enable_devignette=map_cfg.enable_devignette,
                closing_radius=map_cfg.closing_radius,
                inpaint_iterations=map_cfg.inpaint_iterations)
            pose_frames = [nearest_valid_fill(
                to_grayscale(preprocess_frame(f, pose_cfg, config.intrinsics)[0]), v)
                for f, v in zip(frames, valid_masks)]

    with _stage(timings, "keyframes"):
        selection = select_keyframes(pose_frames, config.keyframe_threshold,
                                     config.keyframe_window, config.flow)
        kf = selection.indices
        metrics["keyframes"] = {"indices": [int(i) for i in kf],
                                "scores": [round(float(s), 4) for s in selection.scores]}

    if len(kf) == 1:
        return _single_frame_result(map_frames[kf[0]], valid_masks[kf[0]],
                                    spec_masks[kf[0]], config, metrics, timings,
                                    timestamps, out_dir, write_figures)

    with _stage(timings, "register"):
        pairs = []
        for a in range(len(kf) - 1):
            exclude = ~valid_masks[kf[a]]
            if suppress_pose:
                exclude = exclude | spec_masks[kf[a]]
            est = register_pair(
                pose_frames[kf[a]], pose_frames[kf[a + 1]],
                flow_params=config.flow, ransac_iters=rp.ransac_iters,
                ransac_tol=rp.ransac_tol, patch_radius=rp.patch_radius,
                stride=rp.stride, exclude=exclude,
                seed=config.seed + a, gn_max_iters=rp.gn_max_iters,
                gn_tol=rp.gn_tol, gn_rel_tol=rp.gn_rel_tol, src=a, dst=a + 1)
            pairs.append(est)

    with _stage(timings, "bundle_adjust"):
        chained = [Transform2D.identity()]
        for est in pairs:
            chained.append(Transform2D(chained[-1].m @ np.linalg.inv(est.transform.m),
                                       "affine"))
        consecutive_res = np.median([p.residual for p in pairs])
        candidates = []
        for a in range(len(kf)):
            for b in range(a + 2, len(kf)):
                rel = Transform2D(np.linalg.inv(chained[b].m) @ chained[a].m, "affine")
                frac = _overlap_fraction(pose_frames[kf[a]].shape, rel)
                if frac >= rp.overlap_threshold:
                    candidates.append((b - a, a, b, rel))
        # long spans constrain drift the most; short ones mostly duplicate
        # the consecutive chain
        candidates.sort(key=lambda c: (-c[0], c[1]))
        extra = []
        for _, a, b, rel in candidates[:max(len(kf), 8)]:
            est = _loop_closure_pair(pose_frames[kf[a]], pose_frames[kf[b]],
                                     rel, rp, a, b,
                                     valid1=valid_masks[kf[a]],
                                     valid2=valid_masks[kf[b]])
            # a closure whose photometric fit is far off the consecutive
            # baseline is a misregistration; keep it out of the bundle
            if est is not None and est.residual <= max(10.0 * consecutive_res,
                                                       1e-4):
                extra.append(est)
        all_pairs = pairs + extra
        init_err = transfer_error(all_pairs, chained)
        transforms = bundle_adjust(all_pairs, len(kf), anchor=0)
        final_err = transfer_error(all_pairs, transforms)
        metrics["registration"] = {
            "pairs": [{"src": int(p.src), "dst": int(p.dst),
                       "residual": float(p.residual),
                       "converged": bool(p.converged),
                       "iterations": int(p.iterations)} for p in all_pairs],
            "loop_closures": len(extra),
            "transfer_error_chained": float(init_err),
            "transfer_error_bundle": float(final_err)}

    with _stage(timings, "composite"):
        (ch, cw), layers = warp_layers([map_frames[i] for i in kf], transforms,
                                       masks=[valid_masks[i] for i in kf])
        layers = gain_compensate(layers)
        mosaic = multiband_blend(layers, rp.blend_bands)
        mosaic_valid = np.zeros((ch, cw), dtype=bool)
        for layer in layers:
            mosaic_valid |= layer.mask
        # union of warped specular masks, for exclusion from depth updates
        spec_union = np.zeros((ch, cw), dtype=bool)
        if suppress_map:
            _, spec_layers = warp_layers(
                [spec_masks[i].astype(np.float64) for i in kf], transforms)
            for sl in spec_layers:
                spec_union |= (sl.image > 0.5) & sl.mask
        metrics["mosaic"] = {"width": int(cw), "height": int(ch),
                             "gains": [round(float(l.gain), 5) for l in layers]}

    with _stage(timings, "sfs"):
        light = config.sfs.fixed_params or estimate_light_params(mosaic, mosaic_valid)
        depth = tsai_shah_depth(mosaic, light, config.sfs,
                                valid_mask=mosaic_valid & ~spec_union)
        cloud = depth_to_pointcloud(depth, sample_stride=2, valid_mask=mosaic_valid)
        metrics["sfs"] = {"light": {"tilt": round(light.tilt, 4),
                                    "slant": round(light.slant, 4),
                                    "albedo": round(light.albedo, 4),
                                    "degenerate": bool(light.degenerate)},
                          "mean_abs_residual": round(shading_residual(
                              mosaic, depth, light), 6)}

    est_traj = Trajectory(np.asarray([timestamps[i] for i in kf]),
                          np.c_[[transforms[a].m[0, 2] for a in range(len(kf))],
                                [transforms[a].m[1, 2] for a in range(len(kf))],
                                np.zeros(len(kf))])

    with _stage(timings, "evaluate"):
        if gt_trajectory is not None:
            metrics["ate"] = {
                "scaled": float(ate_rmse(est_traj, gt_trajectory, with_scale=True)),
                "unscaled": float(ate_rmse(est_traj, gt_trajectory, with_scale=False))}
        if gt_cloud is not None and len(cloud) > 8:
            (s, R, t), _ = icp_align(cloud, gt_cloud)
            metrics["ade"] = float(ade_rmse(apply_similarity(cloud, s, R, t), gt_cloud))

    metrics["timings_ms"] = timings
    result = PipelineResult(mosaic, mosaic_valid, depth, cloud, list(kf),
                            transforms, [l.transform for l in layers], metrics)
    if out_dir is not None:
        _write_artifacts(result, est_traj, gt_trajectory, config, out_dir, write_figures)
    return result


def _single_frame_result(frame, valid, spec_mask, config, metrics, timings,
                         timestamps, out_dir, write_figures):
    """Degenerate path: the mosaic is the preprocessed frame itself."""
    transforms = [Transform2D.identity()]
    with _stage(timings, "sfs"):
        light = config.sfs.fixed_params or estimate_light_params(frame, valid)
        depth = tsai_shah_depth(frame, light, config.sfs,
                                valid_mask=valid & ~spec_mask)
        cloud = depth_to_pointcloud(depth, sample_stride=2, valid_mask=valid)
    metrics["mosaic"] = {"width": frame.shape[1], "height": frame.shape[0],
                         "gains": [1.0]}
    metrics["sfs"] = {"light": {"tilt": round(light.tilt, 4),
                                "slant": round(light.slant, 4),
                                "albedo": round(light.albedo, 4),
                                "degenerate": bool(light.degenerate)},
                      "mean_abs_residual": round(shading_residual(frame, depth, light), 6)}
    metrics["timings_ms"] = timings
    result = PipelineResult(frame, valid, depth, cloud, [0], transforms,
                            transforms, metrics)
    if out_dir is not None:
        est = Trajectory(np.asarray(timestamps[:1]), np.zeros((1, 3)))
        _write_artifacts(result, est, None, config, out_dir, write_figures)
    return result


def _write_artifacts(result, est_traj, gt_trajectory, config, out_dir, write_figures):
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    fileio.save_image(out / "mosaic.png", result.mosaic)
    fileio.write_pfm(out / "depth.pfm", result.depth.Z)
    fileio.write_ply(out / "cloud.ply", result.cloud)
    fileio.write_poses(out / "poses.txt", [t.m for t in result.transforms])
    fileio.write_manifest(out / "keyframes.txt", result.keyframes)
    est_traj.save(out / "trajectory.txt")
    with open(out / "metrics.json", "w") as fh:
        json.dump(result.metrics, fh, indent=2)
    config.save(out / "config_used.json")
    if write_figures:
        from . import report
        report.depth_figure(result.depth.Z, out / "fig_depth.png",
                            valid=result.mosaic_valid)
        gt_pos = gt_trajectory.positions if gt_trajectory is not None else None
        report.trajectory_figure(est_traj.positions, gt_pos, out / "fig_trajectory.png")


def run_ablation(frames, config, axes, timestamps=None, gt_trajectory=None,
                 gt_cloud=None, out_dir=None, write_figures=True):
    """Run the pipeline once per on/off combination of the given axes.

    Axes: RS (reflection suppression, both scopes), RSM (suppression for the
    map only), RUD (radial undistortion), DV (de-vignetting). RS and RSM are
    mutually exclusive. Returns one report with ATE/ADE per combination.
    """
    axes = list(axes)
    valid_axes = {"RS", "RSM", "RUD", "DV"}
    for ax in axes:
        if ax not in valid_axes:
            raise ConfigError(f"unknown ablation axis {ax!r}")
    if "RS" in axes and "RSM" in axes:
        raise ConfigError("RS and RSM axes are mutually exclusive")
    if not axes:
        raise ConfigError("no ablation axes given")

    rows = []
    for combo in itertools.product([False, True], repeat=len(axes)):
        switches = dict(zip(axes, combo))
        cfg = PipelineConfig.from_dict(config.to_dict())
        if "RS" in switches:
            cfg.preprocess.enable_reflection_suppression = switches["RS"]
            cfg.reflection_scope = "both"
        if "RSM" in switches:
            cfg.preprocess.enable_reflection_suppression = switches["RSM"]
            cfg.reflection_scope = "map_only"
        if "RUD" in switches:
            cfg.preprocess.enable_undistort = switches["RUD"]
        if "DV" in switches:
            cfg.preprocess.enable_devignette = switches["DV"]
        cfg.validate()
        result = run_pipeline(frames, cfg, timestamps=timestamps,
                              gt_trajectory=gt_trajectory, gt_cloud=gt_cloud)
        row = {"combo": switches,
               "ate": result.metrics.get("ate"),
               "ade": result.metrics.get("ade"),
               "keyframes": len(result.keyframes)}
        rows.append(row)

    report_dict = {"schema_version": METRICS_SCHEMA_VERSION,
                   "axes": axes, "rows": rows}
    if out_dir is not None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        with open(out / "ablation.json", "w") as fh:
            json.dump(report_dict, fh, indent=2)
        if write_figures:
            from . import report
            report.ablation_figure(rows, out / "fig_ablation.png")
    return report_dict
