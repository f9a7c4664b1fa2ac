"""Shape from shading by linearized per-pixel Newton iteration.

The reflectance model is Lambertian with a single distant light described
by tilt (azimuth), slant (polar angle) and albedo:

    R(p, q) = albedo * (cos s + p cos t sin s + q sin t sin s) / sqrt(p^2 + q^2 + 1)

with p, q the backward-difference height gradients. Depth is recovered by
Jacobi sweeps of a damped Newton update on f = I - R per pixel.
"""

import math
from dataclasses import dataclass

import numpy as np

from .imgcore import sobel_gradients


@dataclass
class LightParams:
    """Light direction (tilt = azimuth, slant = polar from the view axis) and albedo."""

    tilt: float
    slant: float
    albedo: float
    degenerate: bool = False

    def __post_init__(self):
        if not 0.0 <= self.slant < math.pi / 2:
            raise ValueError("slant must lie in [0, pi/2)")
        if self.albedo <= 0:
            raise ValueError("albedo must be positive")

    @property
    def direction(self):
        return np.array([math.cos(self.tilt) * math.sin(self.slant),
                         math.sin(self.tilt) * math.sin(self.slant),
                         math.cos(self.slant)])

    def to_dict(self):
        return {"tilt": self.tilt, "slant": self.slant, "albedo": self.albedo}

    @classmethod
    def from_dict(cls, d):
        return cls(float(d["tilt"]), float(d["slant"]), float(d["albedo"]))


@dataclass
class SfsConfig:
    iterations: int = 200
    damping: float = 1e-3          # Levenberg term lam in step df/(df^2 + lam)
    relaxation: float = 0.6        # Jacobi under-relaxation factor
    shadow_threshold: float = 1e-6  # pixels at or below are frozen (unlit)
    max_step: float = 0.5          # per-sweep |dZ| bound (trust region)
    fixed_params: LightParams = None

    def __post_init__(self):
        if self.iterations < 1:
            raise ValueError("iterations must be >= 1")
        if self.damping <= 0 or not 0 < self.relaxation <= 1:
            raise ValueError("invalid damping/relaxation")
        if self.max_step is not None and self.max_step <= 0:
            raise ValueError("max_step must be positive")

    def to_dict(self):
        d = {"iterations": self.iterations, "damping": self.damping,
             "relaxation": self.relaxation, "shadow_threshold": self.shadow_threshold,
             "max_step": self.max_step}
        if self.fixed_params is not None:
            d["fixed_params"] = self.fixed_params.to_dict()
        return d

    @classmethod
    def from_dict(cls, d):
        d = dict(d)
        fp = d.pop("fixed_params", None)
        cfg = cls(**d)
        if fp is not None:
            cfg.fixed_params = LightParams.from_dict(fp)
        return cfg


@dataclass
class DepthMap:
    """Relative per-pixel height with its backward-difference gradient fields."""

    Z: np.ndarray
    p: np.ndarray
    q: np.ndarray

    @property
    def width(self):
        return self.Z.shape[1]

    @property
    def height(self):
        return self.Z.shape[0]


def backward_differences(Z):
    """p = Z(x,y) - Z(x-1,y), q = Z(x,y) - Z(x,y-1), replicated at borders."""
    p = Z - np.concatenate([Z[:, :1], Z[:, :-1]], axis=1)
    q = Z - np.concatenate([Z[:1, :], Z[:-1, :]], axis=0)
    return p, q


def reflectance(p, q, light):
    """Lambertian shading of gradients (p, q) under `light` (may be negative)."""
    a = math.cos(light.tilt) * math.sin(light.slant)
    b = math.sin(light.tilt) * math.sin(light.slant)
    w = np.sqrt(np.square(p) + np.square(q) + 1.0)
    return light.albedo * (math.cos(light.slant) + p * a + q * b) / w


def reflectance_dZ(p, q, light):
    """Analytic d f / dZ of f = I - R at the pixel, using dp/dZ = dq/dZ = 1."""
    a = math.cos(light.tilt) * math.sin(light.slant)
    b = math.sin(light.tilt) * math.sin(light.slant)
    w2 = np.square(p) + np.square(q) + 1.0
    w = np.sqrt(w2)
    num = math.cos(light.slant) + p * a + q * b
    dR = light.albedo * ((a + b) / w - num * (p + q) / (w2 * w))
    return -dR


def illumination_ratios(light):
    """The classic (i_x, i_y) = (cos t tan s, sin t tan s) direction ratios."""
    if math.cos(light.slant) <= 1e-12:
        raise ValueError("slant too close to pi/2; direction ratios undefined")
    t = math.tan(light.slant)
    return math.cos(light.tilt) * t, math.sin(light.tilt) * t


def tsai_shah_depth(img, light, cfg=None, valid_mask=None):
    """Iterative depth recovery from shading.

    Z starts at zero; every sweep recomputes p, q from the previous depth
    and applies the damped Newton step

        Z <- Z - relax * f * f' / (f'^2 + damping),   f = I - max(0, R)

    with f' the analytic derivative. Pixels at or below the shadow threshold
    and pixels outside `valid_mask` are frozen: the Lambertian model carries
    no usable shading information there.
    """
    if img.ndim != 2:
        raise ValueError("tsai_shah_depth expects a grayscale image")
    cfg = cfg or SfsConfig()
    illumination_ratios(light)     # raises when cos(slant) degenerates

    update = img > cfg.shadow_threshold
    if valid_mask is not None:
        update &= np.asarray(valid_mask, dtype=bool)

    Z = np.zeros_like(img, dtype=np.float64)
    lam = cfg.damping
    omega = cfg.relaxation
    for _ in range(cfg.iterations):
        p, q = backward_differences(Z)
        f = img - np.maximum(0.0, reflectance(p, q, light))
        df = reflectance_dZ(p, q, light)
        step = -f * df / (df * df + lam)
        if cfg.max_step is not None:
            step = np.clip(step, -cfg.max_step, cfg.max_step)
        Z = np.where(update, Z + omega * step, Z)
    p, q = backward_differences(Z)
    return DepthMap(Z, p, q)


def shading_residual(img, depth, light):
    """Mean |I - R| over pixels; diagnostic for convergence checks."""
    r = reflectance(depth.p, depth.q, light)
    return float(np.abs(img - np.maximum(0.0, r)).mean())


def depth_to_pointcloud(depth, sample_stride=1, valid_mask=None):
    """(x, y, Z) triples on a stride grid, skipping invalid pixels."""
    if sample_stride < 1:
        raise ValueError("stride must be >= 1")
    h, w = depth.Z.shape
    ys = np.arange(0, h, sample_stride)
    xs = np.arange(0, w, sample_stride)
    gy, gx = np.meshgrid(ys, xs, indexing="ij")
    gx = gx.ravel()
    gy = gy.ravel()
    keep = np.ones(gx.shape, dtype=bool)
    if valid_mask is not None:
        keep = np.asarray(valid_mask, dtype=bool)[gy, gx]
    return np.c_[gx[keep], gy[keep], depth.Z[gy[keep], gx[keep]]].astype(np.float64)


# --- light parameter estimation -------------------------------------------

_MOMENT_TABLE = None


def _sphere_moment_table(n_sigma=181, n_theta=256, n_phi=512):
    """First and second intensity moments of an orthographic Lambertian
    sphere image as functions of the slant angle.

    Normals are weighted by their projected area (image-plane sampling of a
    spherical surface). Returns (slants, m1, m2) with albedo factored out.
    """
    global _MOMENT_TABLE
    if _MOMENT_TABLE is not None:
        return _MOMENT_TABLE
    theta = (np.arange(n_theta) + 0.5) * (math.pi / 2) / n_theta
    phi = (np.arange(n_phi) + 0.5) * (2 * math.pi) / n_phi
    tt, pp = np.meshgrid(theta, phi, indexing="ij")
    nz = np.cos(tt)
    nx = np.sin(tt) * np.cos(pp)
    w = nz * np.sin(tt)                      # projected-area weight x solid angle
    wsum = w.sum()

    slants = np.linspace(0.0, math.pi / 2 - 1e-3, n_sigma)
    m1 = np.empty(n_sigma)
    m2 = np.empty(n_sigma)
    for i, s in enumerate(slants):
        shade = np.maximum(0.0, math.cos(s) * nz + math.sin(s) * nx)
        m1[i] = (w * shade).sum() / wsum
        m2[i] = (w * shade ** 2).sum() / wsum
    _MOMENT_TABLE = (slants, m1, m2)
    return _MOMENT_TABLE


def estimate_light_params(img, mask=None):
    """Statistics-based light estimation.

    Tilt comes from the mean unit image gradient; slant and albedo from the
    first and second intensity moments matched against the Lambertian sphere
    statistics. Constant images return a flagged frontal-light fallback.
    """
    if img.ndim != 2:
        raise ValueError("estimate_light_params expects a grayscale image")
    sel = np.ones(img.shape, dtype=bool) if mask is None else np.asarray(mask, bool)
    sel &= img > 1e-6
    vals = img[sel]
    if vals.size < 16 or vals.std() < 1e-9:
        rho = float(img.mean()) if vals.size == 0 else float(vals.mean())
        return LightParams(0.0, 0.0, max(rho, 1e-6), degenerate=True)

    gx, gy = sobel_gradients(img)
    mag = np.hypot(gx, gy)
    gsel = sel & (mag > max(1e-12, np.percentile(mag[sel], 50)))
    if gsel.sum() < 8:
        gsel = sel & (mag > 1e-12)
    ux = (gx[gsel] / mag[gsel]).mean()
    uy = (gy[gsel] / mag[gsel]).mean()
    # with the reflectance convention above, shading brightens down-gradient
    tilt = math.atan2(-uy, -ux)

    mu1 = float(vals.mean())
    mu2 = float((vals ** 2).mean())
    slants, m1, m2 = _sphere_moment_table()
    q_meas = mu1 * mu1 / max(mu2, 1e-12)
    q_model = m1 * m1 / m2
    idx = int(np.argmin(np.abs(q_model - q_meas)))
    slant = float(slants[idx])
    rho = mu1 / max(m1[idx], 1e-9)
    rho = float(np.clip(rho, 1e-6, 1.0))
    return LightParams(tilt, min(slant, math.pi / 2 - 1e-6), rho)
