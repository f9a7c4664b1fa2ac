"""Pairwise and joint registration: RANSAC homography from flow
correspondences, patch-weighted Gauss-Newton affine refinement, bundle
adjustment, warping, gain compensation and multi-band blending.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .errors import DegenerateGeometry, DisconnectedGraph, EmptyOverlap, InsufficientMatches
from .flow import farneback_flow
from .imgcore import (collapse_pyramid, gaussian_pyramid, laplacian_pyramid,
                      nearest_valid_fill, sample_bilinear)


@dataclass
class Transform2D:
    """3x3 homogeneous planar transform, homography or affine."""

    m: np.ndarray
    kind: str = "homography"

    def __post_init__(self):
        m = np.asarray(self.m, dtype=np.float64).reshape(3, 3)
        if abs(m[2, 2]) < 1e-12:
            raise ValueError("non-normalizable transform (m22 ~ 0)")
        self.m = m / m[2, 2]
        if self.kind not in ("homography", "affine"):
            raise ValueError(f"unknown transform kind {self.kind!r}")
        if self.kind == "affine" and np.abs(self.m[2, :2]).max() > 1e-9:
            raise ValueError("affine transform has nonzero projective row")

    @classmethod
    def identity(cls, kind="affine"):
        return cls(np.eye(3), kind)

    @classmethod
    def translation(cls, tx, ty):
        m = np.eye(3)
        m[0, 2], m[1, 2] = tx, ty
        return cls(m, "affine")

    @classmethod
    def from_affine_params(cls, a1, a2, a3, a4, tx, ty):
        return cls(np.array([[a1, a2, tx], [a3, a4, ty], [0.0, 0.0, 1.0]]), "affine")

    @property
    def affine_params(self):
        m = self.m
        return np.array([m[0, 0], m[0, 1], m[1, 0], m[1, 1], m[0, 2], m[1, 2]])

    def apply(self, points):
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        ph = np.c_[pts, np.ones(len(pts))]
        q = ph @ self.m.T
        return q[:, :2] / q[:, 2:3]

    def inverse(self):
        return Transform2D(np.linalg.inv(self.m), self.kind)

    def compose(self, other):
        """self after other: (self @ other)(p) = self(other(p))."""
        kind = "affine" if self.kind == other.kind == "affine" else "homography"
        return Transform2D(self.m @ other.m, kind)


@dataclass
class Correspondences:
    p1: np.ndarray
    p2: np.ndarray

    def __post_init__(self):
        self.p1 = np.asarray(self.p1, dtype=np.float64).reshape(-1, 2)
        self.p2 = np.asarray(self.p2, dtype=np.float64).reshape(-1, 2)
        if len(self.p1) != len(self.p2):
            raise ValueError("point lists differ in length")

    def __len__(self):
        return len(self.p1)

    def subset(self, sel):
        return Correspondences(self.p1[sel], self.p2[sel])


@dataclass
class PatchWeights:
    """Union of unit-weight disks around inlier centers (zero elsewhere)."""

    centers: np.ndarray
    radius: float = 15.0
    _tree: cKDTree = field(default=None, repr=False, compare=False)

    def __post_init__(self):
        self.centers = np.asarray(self.centers, dtype=np.float64).reshape(-1, 2)
        if self.radius <= 0:
            raise ValueError("patch radius must be positive")
        if len(self.centers) == 0:
            raise ValueError("no patch centers")
        self._tree = cKDTree(self.centers)

    def weight_at(self, points):
        """1.0 inside any disk (strict interior per the distance test), else 0."""
        pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
        dist, _ = self._tree.query(pts, k=1)
        return (dist < self.radius).astype(np.float64)

    def support_pixels(self, shape):
        """Integer pixel coordinates (N,2) of the weighted support in an image."""
        h, w = shape[:2]
        lo = np.maximum(np.floor(self.centers.min(axis=0) - self.radius).astype(int), 0)
        hi = np.minimum(np.ceil(self.centers.max(axis=0) + self.radius).astype(int) + 1,
                        [w, h])
        if (hi <= lo).any():
            return np.zeros((0, 2))
        xs = np.arange(lo[0], hi[0])
        ys = np.arange(lo[1], hi[1])
        gx, gy = np.meshgrid(xs, ys)
        pts = np.c_[gx.ravel(), gy.ravel()].astype(np.float64)
        keep = self.weight_at(pts) > 0
        return pts[keep]


@dataclass
class PairEstimate:
    src: int
    dst: int
    transform: Transform2D
    inliers: Correspondences = None
    residual: float = 0.0
    converged: bool = True
    iterations: int = 0


@dataclass
class MosaicLayer:
    index: int
    transform: Transform2D       # frame coords -> canvas coords
    image: np.ndarray
    mask: np.ndarray
    gain: float = 1.0


def flow_to_correspondences(flow, stride=8, exclude=None):
    """Grid-sampled correspondences (x, y) -> (x+u, y+v).

    Skips excluded source pixels and flow targets outside frame 2.
    """
    if stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = flow.u.shape
    ys = np.arange(stride // 2, h, stride)
    xs = np.arange(stride // 2, w, stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    gx = gx.ravel()
    gy = gy.ravel()
    keep = np.ones(gx.shape, dtype=bool)
    if exclude is not None:
        keep &= ~np.asarray(exclude, dtype=bool)[gy, gx]
    tx = gx + flow.u[gy, gx]
    ty = gy + flow.v[gy, gx]
    keep &= (tx >= 0) & (tx <= w - 1) & (ty >= 0) & (ty <= h - 1)
    if keep.sum() < 4:
        raise InsufficientMatches(f"only {int(keep.sum())} usable grid matches")
    return Correspondences(np.c_[gx[keep], gy[keep]],
                           np.c_[tx[keep], ty[keep]])


def _normalize_points(pts):
    centroid = pts.mean(axis=0)
    mean_dist = np.linalg.norm(pts - centroid, axis=1).mean()
    scale = np.sqrt(2.0) / max(mean_dist, 1e-12)
    T = np.array([[scale, 0.0, -scale * centroid[0]],
                  [0.0, scale, -scale * centroid[1]],
                  [0.0, 0.0, 1.0]])
    ph = np.c_[pts, np.ones(len(pts))]
    return (ph @ T.T)[:, :2], T


def _dlt_homography(p1n, p2n):
    """Direct linear transform on pre-normalized points; None if rank deficient."""
    n = len(p1n)
    x, y = p1n[:, 0], p1n[:, 1]
    u, v = p2n[:, 0], p2n[:, 1]
    A = np.zeros((2 * n, 9))
    A[0::2] = np.c_[x, y, np.ones(n), np.zeros((n, 3)), -u * x, -u * y, -u]
    A[1::2] = np.c_[np.zeros((n, 3)), x, y, np.ones(n), -v * x, -v * y, -v]
    if np.linalg.matrix_rank(A) < 8:
        return None
    _, _, vt = np.linalg.svd(A)
    H = vt[-1].reshape(3, 3)
    if abs(H[2, 2]) < 1e-12:
        return None
    return H / H[2, 2]


def _symmetric_transfer_error(H, corr):
    Hinv = np.linalg.inv(H)

    def proj(M, pts):
        ph = np.c_[pts, np.ones(len(pts))]
        q = ph @ M.T
        return q[:, :2] / q[:, 2:3]

    fwd = np.linalg.norm(proj(H, corr.p1) - corr.p2, axis=1)
    bwd = np.linalg.norm(proj(Hinv, corr.p2) - corr.p1, axis=1)
    return np.sqrt(0.5 * (fwd ** 2 + bwd ** 2))


def _collinear(pts, tol=1e-6):
    centered = pts - pts.mean(axis=0)
    s = np.linalg.svd(centered, compute_uv=False)
    return s[-1] < tol * max(s[0], 1.0)


def ransac_homography(corr, iters=500, inlier_tol=2.0, seed=0, confidence=0.999):
    """Best 4-point DLT hypothesis by inlier count, refit on all inliers.

    Stops early once the inlier ratio makes further sampling pointless at
    the given confidence. Deterministic for a fixed seed. Returns
    (Transform2D, inlier mask).
    """
    n = len(corr)
    if n < 4:
        raise InsufficientMatches(f"need >= 4 correspondences, got {n}")
    if _collinear(corr.p1) or _collinear(corr.p2):
        raise DegenerateGeometry("all correspondences are collinear")

    p1n, T1 = _normalize_points(corr.p1)
    p2n, T2 = _normalize_points(corr.p2)
    T2inv = np.linalg.inv(T2)
    rng = np.random.default_rng(seed)

    best_H = None
    best_mask = None
    best_count = -1
    best_err = np.inf
    needed = iters
    done = 0
    while done < min(iters, needed):
        done += 1
        idx = rng.choice(n, size=4, replace=False)
        if _collinear(corr.p1[idx], 1e-3) or _collinear(corr.p2[idx], 1e-3):
            continue
        Hn = _dlt_homography(p1n[idx], p2n[idx])
        if Hn is None:
            continue
        H = T2inv @ Hn @ T1
        if abs(np.linalg.det(H)) < 1e-12:
            continue
        err = _symmetric_transfer_error(H, corr)
        mask = err < inlier_tol
        count = int(mask.sum())
        mean_err = err[mask].mean() if count else np.inf
        if count > best_count or (count == best_count and mean_err < best_err):
            best_H = H
            best_count = count
            best_mask = mask
            best_err = mean_err
            ratio = count / n
            if 0.0 < ratio < 1.0:
                denom = np.log1p(-(ratio ** 4))
                if denom < 0:
                    needed = int(np.ceil(np.log(1.0 - confidence) / denom))
            elif ratio >= 1.0:
                needed = done
    if best_mask is None or best_count < 4:
        raise DegenerateGeometry("no valid RANSAC hypothesis found")

    # refit on all inliers with normalized DLT; fall back to the winning
    # hypothesis if the refit loses inliers
    q1n, S1 = _normalize_points(corr.p1[best_mask])
    q2n, S2 = _normalize_points(corr.p2[best_mask])
    Hn = _dlt_homography(q1n, q2n)
    if Hn is not None:
        H_ref = np.linalg.inv(S2) @ Hn @ S1
        err = _symmetric_transfer_error(H_ref, corr)
        mask = err < inlier_tol
        if mask.sum() >= best_count:
            return Transform2D(H_ref, "homography"), mask
    return Transform2D(best_H, "homography"), best_mask


def _weighted_samples(I1, I2, A, weights, support=None):
    """Sample terms of the weighted SSD cost at the support pixels.

    Returns (pts, w, diff, valid) where w is the product weight
    w(x,y) * w(x',y') and invalid targets carry zero weight.
    """
    pts = weights.support_pixels(I1.shape) if support is None else support
    if len(pts) == 0:
        raise EmptyOverlap("patch weights cover no pixels")
    tpts = A.apply(pts)
    vals2, valid = sample_bilinear(I2, tpts[:, 0], tpts[:, 1])
    w = weights.weight_at(tpts) * valid
    vals1 = I1[pts[:, 1].astype(np.intp), pts[:, 0].astype(np.intp)]
    return pts, w, vals2 - vals1, valid


def emse_cost(I1, I2, A, weights, support=None):
    """Patch-weighted mean squared intensity error of I1 mapped onto I2 by A."""
    if A.kind != "affine":
        raise ValueError("emse_cost expects an affine transform")
    _, w, diff, _ = _weighted_samples(I1, I2, A, weights, support)
    total = w.sum()
    if total <= 0:
        raise EmptyOverlap("zero total weight in overlap")
    return float((w * diff ** 2).sum() / total)


def gauss_newton_affine(I1, I2, init, weights, max_iters=100, tol=1e-9,
                        rel_tol=1e-6, src=-1, dst=-1):
    """Minimize the weighted MSE over the 6 affine parameters.

    Jacobian via image gradients of I2 chain-ruled through the transform;
    singular normal equations fall back to a Levenberg-damped retry. Returns
    the best parameters seen (never worse than the initialization).
    """
    if init.kind != "affine":
        raise ValueError("initialization must be affine")
    g2y, g2x = np.gradient(I2)
    support = weights.support_pixels(I1.shape)
    params = init.affine_params.copy()

    def cost_of(p):
        A = Transform2D.from_affine_params(*p)
        return emse_cost(I1, I2, A, weights, support)

    best_params = params.copy()
    best_cost = prev_cost = cost_of(params)
    converged = best_cost < tol
    lam = 0.0
    it = 0
    while it < max_iters and not converged:
        it += 1
        A = Transform2D.from_affine_params(*params)
        pts, w, diff, _ = _weighted_samples(I1, I2, A, weights, support)
        total = w.sum()
        if total <= 0:
            raise EmptyOverlap("zero total weight in overlap")
        tpts = A.apply(pts)
        gx, _ = sample_bilinear(g2x, tpts[:, 0], tpts[:, 1])
        gy, _ = sample_bilinear(g2y, tpts[:, 0], tpts[:, 1])
        sw = np.sqrt(w)
        x, y = pts[:, 0], pts[:, 1]
        J = np.stack([gx * x, gx * y, gy * x, gy * y, gx, gy], axis=1) * sw[:, None]
        r = diff * sw
        JtJ = J.T @ J
        Jtr = J.T @ r
        cost = None
        for _ in range(6):
            try:
                delta = np.linalg.solve(JtJ + lam * np.diag(np.diag(JtJ)) +
                                        1e-12 * np.eye(6), -Jtr)
            except np.linalg.LinAlgError:
                lam = max(lam * 10.0, 1e-4)
                continue
            trial = params + delta
            try:
                trial_cost = cost_of(trial)
            except EmptyOverlap:
                lam = max(lam * 10.0, 1e-4)
                continue
            if trial_cost <= prev_cost:
                params = trial
                cost = trial_cost
                lam /= 3.0
                break
            lam = max(lam * 10.0, 1e-4)
        if cost is None:
            break
        if cost < best_cost:
            best_cost = cost
            best_params = params.copy()
        if cost < tol or abs(prev_cost - cost) <= rel_tol * max(prev_cost, 1e-30):
            converged = True
        prev_cost = cost

    return PairEstimate(src=src, dst=dst,
                        transform=Transform2D.from_affine_params(*best_params),
                        residual=best_cost, converged=converged or best_cost < tol,
                        iterations=it)


def register_pair(I1, I2, flow_params=None, ransac_iters=500, ransac_tol=2.0,
                  patch_radius=15.0, stride=8, exclude=None, seed=0,
                  gn_max_iters=100, gn_tol=1e-9, gn_rel_tol=1e-6,
                  src=-1, dst=-1):
    """Coarse-to-fine pair registration per the stitching recipe.

    Dense flow matches pixels, RANSAC estimates the coarse homography and
    its inliers define the circular patch weights, then Gauss-Newton refines
    an affine transform initialized from the flow translation.
    """
    fl = farneback_flow(I1, I2, flow_params)
    corr = flow_to_correspondences(fl, stride=stride, exclude=exclude)
    _, inlier_mask = ransac_homography(corr, iters=ransac_iters,
                                       inlier_tol=ransac_tol, seed=seed)
    inliers = corr.subset(inlier_mask)
    weights = PatchWeights(inliers.p1, patch_radius)
    init = Transform2D.translation(float(np.median(fl.u)), float(np.median(fl.v)))
    est = gauss_newton_affine(I1, I2, init, weights, max_iters=gn_max_iters,
                              tol=gn_tol, rel_tol=gn_rel_tol, src=src, dst=dst)
    est.inliers = inliers
    return est


def transfer_error(pairs, transforms):
    """Total squared transfer error of the joint cost used by bundle adjustment."""
    total = 0.0
    for pair in pairs:
        M = np.linalg.inv(transforms[pair.dst].m) @ transforms[pair.src].m
        ph = np.c_[pair.inliers.p1, np.ones(len(pair.inliers))]
        q = ph @ M.T
        q = q[:, :2] / q[:, 2:3]
        total += float(((q - pair.inliers.p2) ** 2).sum())
    return total


def _chain_initialization(pairs, n_frames, anchor):
    transforms = [None] * n_frames
    transforms[anchor] = Transform2D.identity()
    adj = {}
    for pair in pairs:
        adj.setdefault(pair.src, []).append((pair.dst, pair, True))
        adj.setdefault(pair.dst, []).append((pair.src, pair, False))
    stack = [anchor]
    while stack:
        cur = stack.pop()
        for nxt, pair, forward in adj.get(cur, []):
            if transforms[nxt] is not None:
                continue
            A = pair.transform.m
            if forward:
                # globals satisfy T_src = T_dst @ A for a consistent pair
                transforms[nxt] = Transform2D(transforms[cur].m @ np.linalg.inv(A),
                                              "affine")
            else:
                transforms[nxt] = Transform2D(transforms[cur].m @ A, "affine")
            stack.append(nxt)
    missing = [i for i, t in enumerate(transforms) if t is None]
    if missing:
        raise DisconnectedGraph(missing)
    return transforms


def bundle_adjust(pairs, n_frames, anchor=0, max_iters=50, rel_tol=1e-10,
                  max_points_per_pair=200):
    """Jointly optimize per-frame affine transforms over correspondence
    transfer error with the anchor fixed to identity (Levenberg-Marquardt).

    Result is never worse than the chained pairwise initialization.
    """
    if not 0 <= anchor < n_frames:
        raise ValueError("anchor index out of range")
    pairs = [p for p in pairs if p.inliers is not None and len(p.inliers) > 0]
    if not pairs:
        raise ValueError("no pairs with correspondences")

    sub_pairs = []
    for p in pairs:
        if len(p.inliers) > max_points_per_pair:
            sel = np.linspace(0, len(p.inliers) - 1, max_points_per_pair).astype(int)
            sub_pairs.append(PairEstimate(p.src, p.dst, p.transform,
                                          p.inliers.subset(sel)))
        else:
            sub_pairs.append(p)

    init = _chain_initialization(sub_pairs, n_frames, anchor)
    free = [i for i in range(n_frames) if i != anchor]
    slot = {f: k for k, f in enumerate(free)}

    def unpack(theta):
        ts = []
        for i in range(n_frames):
            if i == anchor:
                ts.append(Transform2D.identity())
            else:
                a1, a2, a3, a4, tx, ty = theta[6 * slot[i]:6 * slot[i] + 6]
                ts.append(Transform2D.from_affine_params(a1, a2, a3, a4, tx, ty))
        return ts

    theta = np.concatenate([init[i].affine_params for i in free]) if free else np.zeros(0)
    if not free:
        return init

    def residuals_and_jac(theta):
        ts = unpack(theta)
        res_blocks = []
        jac_blocks = []
        for pair in sub_pairs:
            Ts = ts[pair.src].m
            Td = ts[pair.dst].m
            Tdinv = np.linalg.inv(Td)
            M = Tdinv @ Ts
            p1 = pair.inliers.p1
            n = len(p1)
            ph = np.c_[p1, np.ones(n)]
            q = (ph @ M.T)[:, :2]
            res = q - pair.inliers.p2
            J = np.zeros((2 * n, len(theta)))
            B = Tdinv[:2, :2]
            if pair.src != anchor:
                base = 6 * slot[pair.src]
                # dq/d(src params): Tdinv applied to basis derivative images
                cols = {0: p1[:, 0], 1: p1[:, 1], 4: np.ones(n)}       # x-row params
                for k, val in cols.items():
                    J[0::2, base + k] += B[0, 0] * val
                    J[1::2, base + k] += B[1, 0] * val
                cols = {2: p1[:, 0], 3: p1[:, 1], 5: np.ones(n)}       # y-row params
                for k, val in cols.items():
                    J[0::2, base + k] += B[0, 1] * val
                    J[1::2, base + k] += B[1, 1] * val
            if pair.dst != anchor:
                base = 6 * slot[pair.dst]
                # dq/d(dst params) = -Tdinv dTd/dk [q; 1]
                cols = {0: q[:, 0], 1: q[:, 1], 4: np.ones(n)}
                for k, val in cols.items():
                    J[0::2, base + k] -= B[0, 0] * val
                    J[1::2, base + k] -= B[1, 0] * val
                cols = {2: q[:, 0], 3: q[:, 1], 5: np.ones(n)}
                for k, val in cols.items():
                    J[0::2, base + k] -= B[0, 1] * val
                    J[1::2, base + k] -= B[1, 1] * val
            res_blocks.append(res.reshape(-1))
            jac_blocks.append(J)
        return np.concatenate(res_blocks), np.vstack(jac_blocks)

    def cost(theta):
        return transfer_error(sub_pairs, unpack(theta))

    best_theta = theta.copy()
    best_cost = cost(theta)
    lam = 1e-6
    cur = best_cost
    for _ in range(max_iters):
        r, J = residuals_and_jac(theta)
        JtJ = J.T @ J
        Jtr = J.T @ r
        improved = False
        for _ in range(8):
            try:
                delta = np.linalg.solve(
                    JtJ + lam * np.diag(np.maximum(np.diag(JtJ), 1e-12)), -Jtr)
            except np.linalg.LinAlgError:
                lam *= 10.0
                continue
            trial = theta + delta
            c = cost(trial)
            if c < cur:
                theta = trial
                cur = c
                lam = max(lam / 3.0, 1e-12)
                improved = True
                break
            lam *= 10.0
        if cur < best_cost:
            best_cost = cur
            best_theta = theta.copy()
        if not improved or abs(best_cost - cur) <= rel_tol * max(best_cost, 1e-30):
            if not improved:
                break
    return unpack(best_theta)


def warp_layers(frames, transforms, masks=None):
    """Warp frames into the common canvas of the union of transformed corners.

    Returns ((canvas_h, canvas_w), layers); each layer holds its canvas-space
    transform, the inverse-warped image and a validity mask.
    """
    corners_all = []
    for frame, T in zip(frames, transforms):
        h, w = frame.shape[:2]
        corners = np.array([[0, 0], [w - 1, 0], [0, h - 1], [w - 1, h - 1]], float)
        corners_all.append(T.apply(corners))
    corners_all = np.vstack(corners_all)
    lo = np.floor(corners_all.min(axis=0))
    hi = np.ceil(corners_all.max(axis=0))
    canvas_w = int(hi[0] - lo[0]) + 1
    canvas_h = int(hi[1] - lo[1]) + 1
    shift = Transform2D.translation(-lo[0], -lo[1])

    layers = []
    yy, xx = np.mgrid[0:canvas_h, 0:canvas_w].astype(np.float64)
    for idx, (frame, T) in enumerate(zip(frames, transforms)):
        canvas_T = shift.compose(T)
        inv = canvas_T.inverse()
        pts = inv.apply(np.c_[xx.ravel(), yy.ravel()])
        vals, valid = sample_bilinear(frame, pts[:, 0], pts[:, 1])
        if frame.ndim == 3:
            img = vals.reshape(canvas_h, canvas_w, 3)
        else:
            img = vals.reshape(canvas_h, canvas_w)
        mask = valid.reshape(canvas_h, canvas_w)
        if masks is not None and masks[idx] is not None:
            mvals, mvalid = sample_bilinear(masks[idx].astype(np.float64),
                                            pts[:, 0], pts[:, 1])
            mask = mask & (mvals.reshape(canvas_h, canvas_w) > 0.5) & \
                mvalid.reshape(canvas_h, canvas_w)
        if frame.ndim == 3:
            img = np.where(mask[..., None], img, 0.0)
        else:
            img = np.where(mask, img, 0.0)
        layers.append(MosaicLayer(idx, canvas_T, img, mask))
    return (canvas_h, canvas_w), layers


def _layer_gray(layer):
    img = layer.image
    return img.mean(axis=2) if img.ndim == 3 else img


def gain_compensate(layers, sigma_n=10.0 / 255.0, sigma_g=0.1):
    """Least-squares gains over pairwise overlap means with a unit prior.

    Layers without overlap keep gain 1 from the prior alone.
    """
    k = len(layers)
    if k == 0:
        raise ValueError("no layers")
    A = np.zeros((k, k))
    b = np.zeros(k)
    inv_sn2 = 1.0 / sigma_n ** 2
    inv_sg2 = 1.0 / sigma_g ** 2
    for i in range(k):
        A[i, i] += inv_sg2
        b[i] += inv_sg2
    for i in range(k):
        for j in range(i + 1, k):
            overlap = layers[i].mask & layers[j].mask
            n_ij = int(overlap.sum())
            if n_ij == 0:
                continue
            mi = float(_layer_gray(layers[i])[overlap].mean())
            mj = float(_layer_gray(layers[j])[overlap].mean())
            A[i, i] += n_ij * inv_sn2 * mi * mi
            A[j, j] += n_ij * inv_sn2 * mj * mj
            A[i, j] -= n_ij * inv_sn2 * mi * mj
            A[j, i] -= n_ij * inv_sn2 * mi * mj
    gains = np.linalg.solve(A, b)
    out = []
    for layer, g in zip(layers, gains):
        out.append(MosaicLayer(layer.index, layer.transform, layer.image,
                               layer.mask, float(g)))
    return out


def max_blend_levels(shape, bands):
    feasible = 1
    m = min(shape[0], shape[1])
    while m / 2 ** feasible >= 2:
        feasible += 1
    return min(bands, feasible)


def multiband_blend(layers, bands=5):
    """Laplacian-pyramid blending with smoothed max-weight masks.

    Per-layer weight is the distance to the mask border; each band mixes the
    layer pyramids with the Gaussian pyramid of the binary argmax masks.
    """
    if bands < 1:
        raise ValueError("bands must be >= 1")
    if not layers:
        raise ValueError("no layers to blend")
    canvas_shape = layers[0].image.shape
    union = np.zeros(canvas_shape[:2], dtype=bool)
    for layer in layers:
        union |= layer.mask
    if len(layers) == 1:
        layer = layers[0]
        out = np.clip(layer.image * layer.gain, 0.0, 1.0)
        zero = ~layer.mask
        if out.ndim == 3:
            out[zero] = 0.0
        else:
            out = np.where(layer.mask, out, 0.0)
        return out

    levels = max_blend_levels(canvas_shape, bands)
    weights = []
    for layer in layers:
        weights.append(ndimage.distance_transform_edt(layer.mask))
    stack = np.stack(weights)
    arg = stack.argmax(axis=0)

    num = None
    den = None
    for li, layer in enumerate(layers):
        sel = (arg == li) & layer.mask
        filled = nearest_valid_fill(layer.image * layer.gain, layer.mask)
        img_bands = laplacian_pyramid(filled, levels)
        msk_bands = gaussian_pyramid(sel.astype(np.float64), levels)
        if num is None:
            num = [b * (m[..., None] if b.ndim == 3 else m)
                   for b, m in zip(img_bands, msk_bands)]
            den = list(msk_bands)
        else:
            for k in range(levels):
                m = msk_bands[k]
                num[k] = num[k] + img_bands[k] * (m[..., None] if img_bands[k].ndim == 3 else m)
                den[k] = den[k] + m
    blended = []
    for k in range(levels):
        d = np.maximum(den[k], 1e-12)
        blended.append(num[k] / (d[..., None] if num[k].ndim == 3 else d))
    out = collapse_pyramid(blended)
    out = np.clip(out, 0.0, 1.0)
    if out.ndim == 3:
        out[~union] = 0.0
    else:
        out = np.where(union, out, 0.0)
    return out
