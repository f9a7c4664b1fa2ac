"""Dense optical flow by quadratic polynomial expansion and pyramidal
sparse window tracking.

The dense estimator fits f(x) ~ c + b.x + x^T A x to every neighborhood of
both frames (weighted least squares against a Gaussian applicability),
solves A d = db for the displacement, and iterates coarse-to-fine with
warping of the second frame's expansion. Low-certainty pixels keep the
displacement propagated from the coarser level.
"""

from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from .imgcore import downsample2


@dataclass
class FlowParams:
    pyramid_levels: int = 4
    window_radius: int = 7
    iterations: int = 3
    poly_radius: int = 5

    def __post_init__(self):
        if min(self.pyramid_levels, self.window_radius,
               self.iterations, self.poly_radius) < 1:
            raise ValueError("all flow parameters must be positive")

    def to_dict(self):
        return {"pyramid_levels": self.pyramid_levels,
                "window_radius": self.window_radius,
                "iterations": self.iterations,
                "poly_radius": self.poly_radius}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


@dataclass
class FlowField:
    u: np.ndarray
    v: np.ndarray

    @property
    def width(self):
        return self.u.shape[1]

    @property
    def height(self):
        return self.u.shape[0]

    def magnitude(self):
        return np.hypot(self.u, self.v)


def mean_flow_magnitude(flow):
    """Sum of per-pixel displacement magnitudes normalized by pixel count."""
    return float(flow.magnitude().sum() / (flow.width * flow.height))


def _poly_expand(img, radius, sigma):
    """Per-pixel quadratic expansion coefficients (c, bx, by, axx, ayy, axy)."""
    x = np.arange(-radius, radius + 1, dtype=np.float64)
    g = np.exp(-(x ** 2) / (2.0 * sigma ** 2))
    g /= g.sum()
    k0, k1, k2 = g, x * g, x * x * g

    def corr(ky, kx):
        t = ndimage.correlate1d(img, kx, axis=1, mode="nearest")
        return ndimage.correlate1d(t, ky, axis=0, mode="nearest")

    # basis order [1, x, y, x^2, y^2, xy]
    m = np.stack([corr(k0, k0), corr(k0, k1), corr(k1, k0),
                  corr(k0, k2), corr(k2, k0), corr(k1, k1)], axis=-1)

    s2 = float((x * x * g).sum())
    s4 = float((x ** 4 * g).sum())
    G = np.zeros((6, 6))
    G[0, 0] = 1.0
    G[0, 3] = G[3, 0] = G[0, 4] = G[4, 0] = s2
    G[1, 1] = G[2, 2] = s2
    G[3, 3] = G[4, 4] = s4
    G[3, 4] = G[4, 3] = s2 * s2
    G[5, 5] = s2 * s2
    r = m @ np.linalg.inv(G).T
    return r[..., 0], r[..., 1], r[..., 2], r[..., 3], r[..., 4], r[..., 5]


def _sample(arr, ys, xs):
    return ndimage.map_coordinates(arr, [ys, xs], order=1, mode="nearest")


def _flow_level(e1, e2, u, v, window_radius, iterations):
    """Displacement iterations at one pyramid level (full-displacement form)."""
    _, bx1, by1, axx1, ayy1, axy1 = e1
    _, bx2, by2, axx2, ayy2, axy2 = e2
    h, w = bx1.shape
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    size = 2 * window_radius + 1

    def blur(z):
        return ndimage.uniform_filter(z, size, mode="nearest")

    for _ in range(iterations):
        sx, sy = xx + u, yy + v
        valid = (sx >= 0) & (sx <= w - 1) & (sy >= 0) & (sy <= h - 1)
        cy = np.clip(sy, 0, h - 1)
        cx = np.clip(sx, 0, w - 1)
        # averaged quadratic part; off-diagonal of A is axy/2
        a11 = 0.5 * (axx1 + np.where(valid, _sample(axx2, cy, cx), axx1))
        a22 = 0.5 * (ayy1 + np.where(valid, _sample(ayy2, cy, cx), ayy1))
        a12 = 0.25 * (axy1 + np.where(valid, _sample(axy2, cy, cx), axy1))
        dbx = np.where(valid, -0.5 * (_sample(bx2, cy, cx) - bx1), 0.0) + a11 * u + a12 * v
        dby = np.where(valid, -0.5 * (_sample(by2, cy, cx) - by1), 0.0) + a12 * u + a22 * v

        g11 = blur(a11 * a11 + a12 * a12)
        g12 = blur(a12 * (a11 + a22))
        g22 = blur(a22 * a22 + a12 * a12)
        h1 = blur(a11 * dbx + a12 * dby)
        h2 = blur(a12 * dbx + a22 * dby)

        det = g11 * g22 - g12 * g12
        # contrast-relative certainty gate: low-texture or aperture-limited
        # pixels keep the flow propagated from the coarser level
        ok = det > 1e-12 * (g11 + g22) ** 2 + 1e-300
        safe = np.where(ok, det, 1.0)
        u = np.where(ok, (g22 * h1 - g12 * h2) / safe, u)
        v = np.where(ok, (g11 * h2 - g12 * h1) / safe, v)
    return u, v


def farneback_flow(f1, f2, params=None):
    """Dense displacement field mapping f1 pixels onto f2."""
    if f1.shape != f2.shape:
        raise ValueError("frames must have equal dimensions")
    if f1.ndim != 2:
        raise ValueError("farneback_flow expects grayscale frames")
    params = params or FlowParams()
    sigma = 0.4 * params.poly_radius + 0.3

    levels = params.pyramid_levels
    while levels > 1 and min(f1.shape) / 2 ** (levels - 1) < 2 * params.poly_radius + 1:
        levels -= 1
    p1, p2 = [f1.astype(np.float64)], [f2.astype(np.float64)]
    for _ in range(levels - 1):
        p1.append(downsample2(p1[-1]))
        p2.append(downsample2(p2[-1]))

    u = v = None
    for lev in range(levels - 1, -1, -1):
        a, b = p1[lev], p2[lev]
        if u is None:
            u = np.zeros_like(a)
            v = np.zeros_like(a)
        else:
            h, w = a.shape
            ys = np.minimum(np.arange(h) / 2.0, u.shape[0] - 1.0)
            xs = np.minimum(np.arange(w) / 2.0, u.shape[1] - 1.0)
            grid = np.meshgrid(ys, xs, indexing="ij")
            u = 2.0 * ndimage.map_coordinates(u, grid, order=1, mode="nearest")
            v = 2.0 * ndimage.map_coordinates(v, grid, order=1, mode="nearest")
        e1 = _poly_expand(a, params.poly_radius, sigma)
        e2 = _poly_expand(b, params.poly_radius, sigma)
        u, v = _flow_level(e1, e2, u, v, params.window_radius, params.iterations)
    return FlowField(u, v)


def lucas_kanade_track(f1, f2, points, params=None, max_step=2.0, conv_tol=0.01,
                       max_refine=20):
    """Pyramidal window tracking of sparse points from f1 into f2.

    Returns (tracked (N,2), status (N,) bool); a point is lost when its
    window leaves the image, the local gradient matrix is degenerate, or
    the refinement diverges.
    """
    params = params or FlowParams()
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    n = len(pts)
    if n == 0:
        return np.zeros((0, 2)), np.zeros(0, dtype=bool)

    levels = params.pyramid_levels
    while levels > 1 and min(f1.shape) / 2 ** (levels - 1) < 2 * params.window_radius + 3:
        levels -= 1
    p1, p2 = [f1.astype(np.float64)], [f2.astype(np.float64)]
    for _ in range(levels - 1):
        p1.append(downsample2(p1[-1]))
        p2.append(downsample2(p2[-1]))

    r = params.window_radius
    offs = np.mgrid[-r:r + 1, -r:r + 1].reshape(2, -1)    # (2, K) as (dy, dx)
    d = np.zeros((n, 2))
    status = np.ones(n, dtype=bool)

    for lev in range(levels - 1, -1, -1):
        a, b = p1[lev], p2[lev]
        h, w = a.shape
        gx = np.gradient(a, axis=1)
        gy = np.gradient(a, axis=0)
        pl = pts / 2.0 ** lev
        d *= 2.0 if lev != levels - 1 else 1.0
        finest = lev == 0

        wy = pl[:, 1:2] + offs[0][None, :]
        wx = pl[:, 0:1] + offs[1][None, :]
        if finest:
            # partially clipped windows are tolerated at coarse levels only
            inside = ((wx.min(axis=1) >= 0) & (wx.max(axis=1) <= w - 1) &
                      (wy.min(axis=1) >= 0) & (wy.max(axis=1) <= h - 1))
            status &= inside

        t_img = _sample(a, wy.ravel(), wx.ravel()).reshape(n, -1)
        t_gx = _sample(gx, wy.ravel(), wx.ravel()).reshape(n, -1)
        t_gy = _sample(gy, wy.ravel(), wx.ravel()).reshape(n, -1)
        g11 = (t_gx * t_gx).sum(axis=1)
        g12 = (t_gx * t_gy).sum(axis=1)
        g22 = (t_gy * t_gy).sum(axis=1)
        det = g11 * g22 - g12 * g12
        solvable = det > 1e-9
        if finest:
            status &= solvable
        safe = np.where(solvable, det, 1.0)

        for _ in range(max_refine):
            qy = wy + d[:, 1:2]
            qx = wx + d[:, 0:1]
            if finest:
                ok = ((qx.min(axis=1) >= 0) & (qx.max(axis=1) <= w - 1) &
                      (qy.min(axis=1) >= 0) & (qy.max(axis=1) <= h - 1))
                status &= ok
            cur = _sample(b, np.clip(qy, 0, h - 1).ravel(),
                          np.clip(qx, 0, w - 1).ravel()).reshape(n, -1)
            diff = t_img - cur
            b1 = (t_gx * diff).sum(axis=1)
            b2 = (t_gy * diff).sum(axis=1)
            sx = np.where(solvable, (g22 * b1 - g12 * b2) / safe, 0.0)
            sy = np.where(solvable, (g11 * b2 - g12 * b1) / safe, 0.0)
            sx = np.clip(sx, -max_step * (r + 1), max_step * (r + 1))
            sy = np.clip(sy, -max_step * (r + 1), max_step * (r + 1))
            d[:, 0] += sx
            d[:, 1] += sy
            active = np.hypot(sx[status], sy[status]) if status.any() else np.zeros(0)
            if np.max(active, initial=0.0) < conv_tol:
                break

    tracked = pts + d
    inside_final = ((tracked[:, 0] >= 0) & (tracked[:, 0] <= f1.shape[1] - 1) &
                    (tracked[:, 1] >= 0) & (tracked[:, 1] <= f1.shape[0] - 1))
    status &= inside_final
    return tracked, status
