"""Acceptance gate: one test per release criterion, each printing a
PASS/FAIL line (run with `pytest tests/test_acceptance.py -v -s`)."""

import math
import time

import numpy as np
import pytest

from endomap.evaluate import (Trajectory, ate_rmse, icp_align,
                              reprojection_error)
from endomap.flow import farneback_flow
from endomap.imgcore import collapse_pyramid, laplacian_pyramid, sample_bilinear
from endomap.keyframes import select_keyframes
from endomap.pipeline import PipelineConfig, run_ablation, run_pipeline
from endomap.preprocess import CameraIntrinsics, PreprocessConfig
from endomap.register import (Correspondences, PairEstimate, Transform2D,
                              bundle_adjust, multiband_blend, register_pair,
                              transfer_error, warp_layers)
from endomap.sfs import (LightParams, SfsConfig, backward_differences,
                         reflectance, reflectance_dZ, tsai_shah_depth)
from endomap.synth import (DegradationConfig, band_limited_texture, bumps_scene,
                           generate_sequence, hemisphere_scene, scene_image,
                           shift_image_periodic, traj_loop, traj_pan)


def report(num, ok, text):
    print(f"\n[{'PASS' if ok else 'FAIL'}] criterion {num}: {text}")
    assert ok, f"criterion {num} failed: {text}"


def warp_image(img, A):
    h, w = img.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(float)
    pts = A.inverse().apply(np.c_[xx.ravel(), yy.ravel()])
    vals, _ = sample_bilinear(img, pts[:, 0], pts[:, 1])
    return vals.reshape(h, w)


def pearson(a, b):
    a = np.asarray(a, float).ravel() - np.mean(a)
    b = np.asarray(b, float).ravel() - np.mean(b)
    return float((a * b).sum() / np.sqrt((a * a).sum() * (b * b).sum() + 1e-30))


def test_criterion_01_registration_recovery():
    rng = np.random.default_rng(42)
    img = band_limited_texture(256, seed=7, scale=10.0, lo=0.2, hi=0.9)
    corners = np.array([[0, 0], [255, 0], [0, 255], [255, 255]], float)
    t0 = time.time()
    worst = 0.0
    for k in range(50):
        t = rng.uniform(-10, 10, 2)
        sh = rng.uniform(-0.05, 0.05, 4)
        A = Transform2D.from_affine_params(1 + sh[0], sh[1], sh[2], 1 + sh[3],
                                           t[0], t[1])
        I2 = warp_image(img, A)
        est = register_pair(img, I2, seed=k)
        err = np.linalg.norm(est.transform.apply(corners) - A.apply(corners),
                             axis=1).mean()
        worst = max(worst, err)
        assert err <= 0.2, f"warp {k}: corner error {err:.4f} px"
    elapsed = time.time() - t0
    report(1, worst <= 0.2 and elapsed < 60.0,
           f"50 affine warps recovered, worst corner error {worst:.4f} px "
           f"(<= 0.2), {elapsed:.1f} s (< 60)")


def test_criterion_02_flow_accuracy_and_matcher_ordering():
    # weak texture plus per-frame sensor noise: the regime where dense
    # neighborhood pooling is expected to beat per-point window tracking
    rng = np.random.default_rng(0)
    base = band_limited_texture(256, seed=7, scale=10.0, lo=0.3, hi=0.8)
    medians = []
    dense_wins = 0
    dense_errs = []
    for shift in range(1, 11):
        f1 = np.clip(base + rng.normal(0, 0.015, base.shape), 0, 1)
        f2 = np.clip(shift_image_periodic(base, shift, 0) +
                     rng.normal(0, 0.015, base.shape), 0, 1)
        fl = farneback_flow(f1, f2)
        med = float(np.median(np.hypot(fl.u - shift, fl.v)))
        medians.append(med)
        assert med <= 0.3, f"shift {shift}: median EPE {med:.3f}"
        dense = reprojection_error(f1, f2, matcher="dense", seed=shift)
        sparse = reprojection_error(f1, f2, matcher="sparse", seed=shift)
        dense_errs.append(dense)
        assert dense <= 0.5, f"shift {shift}: dense reprojection {dense:.3f}"
        if dense < sparse:
            dense_wins += 1
    report(2, max(medians) <= 0.3 and max(dense_errs) <= 0.5 and dense_wins >= 7,
           f"median EPE max {max(medians):.3f} (<= 0.3), dense reprojection max "
           f"{max(dense_errs):.3f} (<= 0.5), dense beat sparse on "
           f"{dense_wins}/10 pairs (>= 7)")


def test_criterion_03_sfs_gradient_and_render_consistency():
    rng = np.random.default_rng(3)
    L = LightParams(1.0, 0.3, 0.9)
    p = rng.uniform(-0.8, 0.8, 1000)
    q = rng.uniform(-0.8, 0.8, 1000)
    eps = 1e-6
    analytic = reflectance_dZ(p, q, L)
    numeric = -(reflectance(p + eps, q + eps, L) -
                reflectance(p - eps, q - eps, L)) / (2 * eps)
    rel = np.abs(analytic - numeric) / np.maximum(np.abs(numeric), 1e-4)
    grad_ok = rel.max() < 1e-4

    scene = hemisphere_scene(size=256, radius=60, height_scale=0.3,
                             surround_albedo=0.9)
    img = scene_image(scene)
    pg, qg = backward_differences(scene.height)
    unit = LightParams(scene.light.tilt, scene.light.slant, 1.0)
    model = scene.albedo * np.maximum(0.0, reflectance(pg, qg, unit))
    render_err = float(np.abs(img - model).max())
    report(3, grad_ok and render_err < 1e-6,
           f"gradient check rel err {rel.max():.2e} (< 1e-4) at 1000 states, "
           f"render/reflectance mismatch {render_err:.2e} (< 1e-6)")


def test_criterion_04_sfs_hemisphere_recovery():
    scene = hemisphere_scene(size=256, radius=40, height_scale=0.08,
                             tilt=1.0, slant=0.3, albedo=0.9)
    img = scene_image(scene)
    lit = img > 1e-6
    t0 = time.time()
    depth = tsai_shah_depth(img, LightParams(1.0, 0.3, 0.9),
                            SfsConfig(iterations=200))
    elapsed = time.time() - t0
    r = pearson(depth.Z[lit], scene.height[lit])
    report(4, r >= 0.9 and elapsed < 30.0,
           f"hemisphere Pearson r = {r:.4f} (>= 0.9) after 200 iterations, "
           f"{elapsed:.1f} s at 256^2 (< 30)")


def test_criterion_05_keyframe_determinism():
    base = band_limited_texture(192, seed=3, scale=9.0, lo=0.2, hi=0.9)
    # threshold 18: cumulative 5 px/frame crosses at frame 4 (20 >= 18 > 15),
    # so every 4th frame; 25 px/frame crosses every frame
    slow = [shift_image_periodic(base, 5.0 * i, 0.0) for i in range(13)]
    fast = [shift_image_periodic(base, 25.0 * i, 0.0) for i in range(8)]
    sel_slow = select_keyframes(slow, threshold=18.0, fallback_window=15)
    sel_fast = select_keyframes(fast, threshold=18.0, fallback_window=15)
    again = select_keyframes(slow, threshold=18.0, fallback_window=15)
    ok = (sel_slow.indices == [0, 4, 8, 12] and
          sel_fast.indices == list(range(8)) and
          again.indices == sel_slow.indices and again.scores == sel_slow.scores)
    report(5, ok,
           f"5 px/frame -> {sel_slow.indices} (expected [0, 4, 8, 12]), "
           f"25 px/frame -> every frame, reruns identical")


def test_criterion_06_bundle_adjustment_loop():
    rng = np.random.default_rng(11)

    def pair(src, dst, A):
        p1 = rng.uniform(10, 190, (40, 2))
        return PairEstimate(src, dst, A, Correspondences(p1, A.apply(p1)))

    A01 = Transform2D.translation(30.0, 0.0)
    A12 = Transform2D.translation(0.0, 25.0)
    A02 = Transform2D.translation(32.0, 26.0)   # ~2 px inconsistent with chain
    pairs = [pair(0, 1, A01), pair(1, 2, A12), pair(0, 2, A02)]
    chained = [Transform2D.identity(),
               Transform2D(np.linalg.inv(A01.m)),
               Transform2D(np.linalg.inv(A01.m) @ np.linalg.inv(A12.m))]
    before = transfer_error(pairs, chained)
    transforms = bundle_adjust(pairs, 3, anchor=0)
    after = transfer_error(pairs, transforms)
    anchor_dev = float(np.abs(transforms[0].m - np.eye(3)).max())
    report(6, after < before and anchor_dev == 0.0,
           f"transfer error {before:.2f} -> {after:.2f} (strict decrease), "
           f"anchor deviation {anchor_dev:.1e}")


def test_criterion_07_end_to_end_ate():
    scene = bumps_scene(size=640, seed=6, texture_amplitude=0.3)
    traj = traj_loop(30, (200, 200), leg=48.0)
    deg = DegradationConfig(vignette_a2=-0.25, k1=-0.05, specular_count=3,
                            noise_sigma=0.01)
    seq = generate_sequence(scene, traj, deg, dims=(160, 160), seed=0)
    K = seq.intrinsics
    cfg = PipelineConfig()
    cfg.intrinsics = CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, k1=deg.k1, k2=deg.k2)
    cfg.preprocess = PreprocessConfig(enable_reflection_suppression=True,
                                      enable_undistort=True,
                                      enable_devignette=True)
    cfg.keyframe_threshold = 8.0
    gt = Trajectory(seq.timestamps, seq.positions)
    result = run_pipeline(seq.frames, cfg, timestamps=seq.timestamps,
                          gt_trajectory=gt)
    ate = result.metrics["ate"]["scaled"]
    length = float(np.linalg.norm(np.diff(seq.positions, axis=0), axis=1).sum())
    frac = ate / length
    report(7, frac <= 0.02,
           f"pan+loop with all degradations: ATE {ate:.3f} over length "
           f"{length:.1f} = {100 * frac:.2f}% (<= 2%)")


def test_criterion_08_ablation_direction():
    scene = hemisphere_scene(size=480, radius=60, height_scale=0.08, tilt=1.0,
                             slant=0.3, albedo=0.9, surround_albedo=0.55,
                             texture_amplitude=0.06, seed=2)
    traj = traj_pan(8, (140, 160), step=(4.0, 0.0))
    deg = DegradationConfig(specular_count=8, specular_radius=8)
    seq = generate_sequence(scene, traj, deg, dims=(160, 160), seed=1)
    xs = np.arange(130, 320, 3)
    ys = np.arange(150, 330, 3)
    gx, gy = np.meshgrid(xs, ys)
    gt_cloud = np.c_[gx.ravel(), gy.ravel(), scene.height[gy.ravel(), gx.ravel()]]
    cfg = PipelineConfig()
    cfg.keyframe_threshold = 6.0
    cfg.sfs.fixed_params = LightParams(1.0, 0.3, 0.9)
    cfg.sfs.iterations = 120
    gt = Trajectory(seq.timestamps, seq.positions)
    rep = run_ablation(seq.frames, cfg, ["RSM"], gt_trajectory=gt,
                       gt_cloud=gt_cloud)
    ade = {row["combo"]["RSM"]: row["ade"] for row in rep["rows"]}
    report(8, ade[True] <= ade[False],
           f"ADE with map-side suppression {ade[True]:.3f} <= without "
           f"{ade[False]:.3f}")


def test_criterion_09_pyramid_and_blend_invariants():
    img = band_limited_texture(96, seed=9, scale=7.0, lo=0.1, hi=0.9)
    rec = collapse_pyramid(laplacian_pyramid(img, 4))
    round_trip = float(np.abs(rec - img).max())

    a = np.full((64, 96), 0.3)
    b = np.full((64, 96), 0.7)
    ts = [Transform2D.identity(), Transform2D.translation(48.0, 0.0)]
    _, layers = warp_layers([a, b], ts)
    mosaic = multiband_blend(layers, bands=4)
    union = layers[0].mask | layers[1].mask
    bounded = (mosaic[union].min() >= 0.3 - 1e-6 and
               mosaic[union].max() <= 0.7 + 1e-6)

    _, solo = warp_layers([img], [Transform2D.identity()])
    identity_err = float(np.abs(multiband_blend(solo, bands=4) - img).max())
    report(9, round_trip <= 1e-6 and bounded and identity_err <= 1e-9,
           f"collapse round trip {round_trip:.2e} (<= 1e-6), two-constant blend "
           f"bounded in [0.3, 0.7], single-layer identity err {identity_err:.2e}")


def test_criterion_10_metric_sanity():
    rng = np.random.default_rng(10)
    gt = Trajectory(np.arange(30) / 30.0, rng.normal(size=(30, 3)) * 5)
    th = 0.7
    axis = np.array([0.3, 1.0, -0.2])
    axis /= np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    R = np.eye(3) + math.sin(th) * K + (1 - math.cos(th)) * (K @ K)
    est = Trajectory(gt.timestamps, (R @ gt.positions.T).T + [1.0, -2.0, 0.5])
    ate = ate_rmse(est, gt)

    cloud = rng.uniform(-10, 10, (400, 2))
    cloud = np.c_[cloud, 0.05 * cloud[:, 0] ** 2 - 0.03 * cloud[:, 1] ** 2]
    th2 = np.deg2rad(10.0)
    Rz = np.array([[math.cos(th2), -math.sin(th2), 0],
                   [math.sin(th2), math.cos(th2), 0], [0, 0, 1]])
    moved = (Rz @ cloud.T).T + [1.0, 2.0, 3.0]
    _, residual = icp_align(moved, cloud, max_iters=200)
    report(10, ate <= 1e-9 and residual < 1e-6,
           f"ATE rigid-transform invariance {ate:.2e} (<= 1e-9), ICP residual "
           f"{residual:.2e} (< 1e-6) on 10 deg + (1,2,3) similarity")
