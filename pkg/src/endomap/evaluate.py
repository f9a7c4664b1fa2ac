"""Evaluation metrics: re-projection error of a matcher on a frame pair,
trajectory ATE RMSE with closed-form alignment, and point-cloud ICP with
absolute depth error."""

from dataclasses import dataclass

import numpy as np
from scipy.spatial import cKDTree

from . import fileio
from .flow import FlowParams, farneback_flow, lucas_kanade_track
from .preprocess import undistort_points
from .register import Correspondences, flow_to_correspondences, ransac_homography


@dataclass
class Trajectory:
    timestamps: np.ndarray
    positions: np.ndarray           # (N, 3)
    quaternions: np.ndarray = None  # (N, 4) as (qx, qy, qz, qw)

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64).ravel()
        self.positions = np.asarray(self.positions, dtype=np.float64).reshape(-1, 3)
        if self.quaternions is None:
            self.quaternions = np.tile([0.0, 0.0, 0.0, 1.0], (len(self.timestamps), 1))
        self.quaternions = np.asarray(self.quaternions, dtype=np.float64).reshape(-1, 4)
        if np.any(np.diff(self.timestamps) <= 0):
            raise ValueError("timestamps must be strictly increasing")
        norms = np.linalg.norm(self.quaternions, axis=1)
        if np.abs(norms - 1.0).max(initial=0.0) > 1e-6:
            raise ValueError("quaternions must be unit norm")

    def __len__(self):
        return len(self.timestamps)

    @classmethod
    def load(cls, path):
        ts, pos, quat = fileio.read_tum(path)
        return cls(ts, pos, quat)

    def save(self, path):
        fileio.write_tum(path, self.timestamps, self.positions, self.quaternions)


def associate(est, gt, window=0.02):
    """Greedy nearest-timestamp pairing within the window (seconds)."""
    candidates = []
    for i, t in enumerate(est.timestamps):
        diffs = np.abs(gt.timestamps - t)
        j = int(np.argmin(diffs))
        if diffs[j] <= window:
            candidates.append((diffs[j], i, j))
    candidates.sort()
    used_i, used_j, pairs = set(), set(), []
    for _, i, j in candidates:
        if i in used_i or j in used_j:
            continue
        used_i.add(i)
        used_j.add(j)
        pairs.append((i, j))
    pairs.sort()
    return pairs


def umeyama_alignment(src, dst, with_scale=True):
    """Closed-form least-squares similarity aligning src onto dst.

    Returns (scale, R (3,3), t (3,)) minimizing ||s R src + t - dst||^2.
    """
    src = np.asarray(src, dtype=np.float64)
    dst = np.asarray(dst, dtype=np.float64)
    mu_s = src.mean(axis=0)
    mu_d = dst.mean(axis=0)
    cs = src - mu_s
    cd = dst - mu_d
    cov = cd.T @ cs / len(src)
    U, D, Vt = np.linalg.svd(cov)
    S = np.eye(3)
    if np.linalg.det(U) * np.linalg.det(Vt) < 0:
        S[2, 2] = -1.0
    R = U @ S @ Vt
    if with_scale:
        var_s = (cs ** 2).sum() / len(src)
        scale = float(np.trace(np.diag(D) @ S) / max(var_s, 1e-30))
    else:
        scale = 1.0
    t = mu_d - scale * R @ mu_s
    return scale, R, t


def ate_rmse(est, gt, with_scale=True, window=0.02):
    """RMSE of positional residuals after rigid (optionally scaled) alignment."""
    pairs = associate(est, gt, window)
    if len(pairs) < 2:
        raise ValueError(f"only {len(pairs)} associated pose pairs")
    p_est = est.positions[[i for i, _ in pairs]]
    p_gt = gt.positions[[j for _, j in pairs]]
    s, R, t = umeyama_alignment(p_est, p_gt, with_scale)
    aligned = (s * (R @ p_est.T)).T + t
    return float(np.sqrt(((aligned - p_gt) ** 2).sum(axis=1).mean()))


def icp_align(src, dst, max_iters=100, tol=1e-6, with_scale=True):
    """Point-to-point ICP with nearest-neighbor correspondences.

    Each iteration applies the closed-form similarity update; stops when the
    relative residual change drops below tol. Returns ((s, R, t), residual)
    with residual the RMS nearest-neighbor distance of the aligned source.
    """
    src = np.asarray(src, dtype=np.float64).reshape(-1, 3)
    dst = np.asarray(dst, dtype=np.float64).reshape(-1, 3)
    if len(src) == 0 or len(dst) == 0:
        raise ValueError("empty point cloud")
    tree = cKDTree(dst)
    # warm start: centroid alignment, unless the clouds already sit closer
    # (centroid shifts mislead on partial overlap)
    shift = dst.mean(axis=0) - src.mean(axis=0)
    d_plain, _ = tree.query(src)
    d_shift, _ = tree.query(src + shift)
    t_tot = shift if (d_shift ** 2).mean() < (d_plain ** 2).mean() else np.zeros(3)
    s_tot, R_tot = 1.0, np.eye(3)
    current = src + t_tot
    prev = None
    residual = np.inf
    for _ in range(max_iters):
        dist, idx = tree.query(current)
        residual = float(np.sqrt((dist ** 2).mean()))
        if prev is not None and abs(prev - residual) <= tol * max(prev, 1e-30):
            break
        prev = residual
        s, R, t = umeyama_alignment(current, dst[idx], with_scale)
        current = (s * (R @ current.T)).T + t
        s_tot = s * s_tot
        R_tot = R @ R_tot
        t_tot = s * (R @ t_tot) + t
    dist, _ = tree.query(current)
    residual = float(np.sqrt((dist ** 2).mean()))
    return (s_tot, R_tot, t_tot), residual


def apply_similarity(points, s, R, t):
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    return (s * (R @ points.T)).T + t


def ade_rmse(est, gt):
    """RMS distance from each estimated point to its nearest ground-truth point."""
    est = np.asarray(est, dtype=np.float64).reshape(-1, 3)
    gt = np.asarray(gt, dtype=np.float64).reshape(-1, 3)
    if len(est) == 0 or len(gt) == 0:
        raise ValueError("empty point cloud")
    dist, _ = cKDTree(gt).query(est)
    return float(np.sqrt((dist ** 2).mean()))


def reprojection_error(f1, f2, K=None, matcher="dense", params=None,
                       stride=8, ransac_iters=500, ransac_tol=2.0, seed=0):
    """Mean distance between re-projected and original matches over inliers.

    Matches come from the dense flow field or the sparse pyramidal tracker,
    coordinates are undistorted with K, a RANSAC homography maps the frame-2
    points back onto frame 1, and the error is averaged over its inliers.
    """
    params = params or FlowParams()
    if matcher == "dense":
        fl = farneback_flow(f1, f2, params)
        corr = flow_to_correspondences(fl, stride=stride)
    elif matcher == "sparse":
        h, w = f1.shape
        ys = np.arange(stride // 2, h, stride)
        xs = np.arange(stride // 2, w, stride)
        gy, gx = np.meshgrid(ys, xs, indexing="ij")
        pts = np.c_[gx.ravel(), gy.ravel()].astype(np.float64)
        tracked, status = lucas_kanade_track(f1, f2, pts, params)
        corr = Correspondences(pts[status], tracked[status])
    else:
        raise ValueError(f"unknown matcher {matcher!r}")

    p1, p2 = corr.p1, corr.p2
    if K is not None:
        p1 = undistort_points(p1, K)
        p2 = undistort_points(p2, K)
    und = Correspondences(p1, p2)
    T, inliers = ransac_homography(und, iters=ransac_iters,
                                   inlier_tol=ransac_tol, seed=seed)
    # re-project frame-2 keypoints onto frame 1 and compare
    back = T.inverse().apply(und.p2[inliers])
    return float(np.linalg.norm(back - und.p1[inliers], axis=1).mean())
