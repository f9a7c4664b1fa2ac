"""Synthetic-scene oracle: Lambertian height fields rendered under a point
light with known poses, plus the degradations the preprocessing stage is
meant to remove (vignette, radial distortion, specular blobs, noise).

World geometry lives on a scene grid larger than the rendered frames;
views are 2D transforms from frame to world coordinates. Ground truth
(poses, depth) is exact by construction.
"""

import math
from dataclasses import dataclass, field

import numpy as np

from .imgcore import sample_bilinear
from .preprocess import CameraIntrinsics, undistort_points
from .register import Transform2D
from .sfs import DepthMap, LightParams, backward_differences, reflectance


@dataclass
class SyntheticScene:
    height: np.ndarray          # Z_gt over the scene grid
    albedo: np.ndarray          # per-pixel reflectance in [0, 1]
    light: LightParams
    texture_amplitude: float = 0.0

    def __post_init__(self):
        if self.height.shape != self.albedo.shape:
            raise ValueError("height and albedo grids must match")
        if not np.isfinite(self.height).all():
            raise ValueError("height field must be finite")


@dataclass
class DegradationConfig:
    vignette_a2: float = 0.0
    vignette_a4: float = 0.0
    k1: float = 0.0
    k2: float = 0.0
    specular_count: int = 0
    specular_radius: float = 6.0
    specular_intensity: float = 1.0
    noise_sigma: float = 0.0

    def any_active(self):
        return (self.vignette_a2 != 0 or self.vignette_a4 != 0 or self.k1 != 0
                or self.k2 != 0 or self.specular_count > 0 or self.noise_sigma > 0)

    def to_dict(self):
        return {k: getattr(self, k) for k in
                ("vignette_a2", "vignette_a4", "k1", "k2", "specular_count",
                 "specular_radius", "specular_intensity", "noise_sigma")}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def band_limited_texture(size, seed=0, scale=10.0, lo=0.0, hi=1.0):
    """Seed-deterministic smooth periodic noise in [lo, hi].

    Synthesized in the Fourier domain, so the texture tiles seamlessly and
    pure translations of it are exact (useful as a flow oracle).
    """
    rng = np.random.default_rng(seed)
    h, w = (size, size) if np.isscalar(size) else size
    spec = rng.normal(size=(h, w)) + 1j * rng.normal(size=(h, w))
    fy = np.fft.fftfreq(h)[:, None]
    fx = np.fft.fftfreq(w)[None, :]
    spec *= np.exp(-(fx ** 2 + fy ** 2) * (2.0 * scale) ** 2)
    img = np.real(np.fft.ifft2(spec))
    img = (img - img.min()) / max(img.max() - img.min(), 1e-12)
    return lo + (hi - lo) * img


def shift_image_periodic(img, dx, dy):
    """Exact periodic translation via Fourier phase shift (test oracle)."""
    fy = np.fft.fftfreq(img.shape[0])[:, None]
    fx = np.fft.fftfreq(img.shape[1])[None, :]
    return np.real(np.fft.ifft2(np.fft.fft2(img) * np.exp(-2j * math.pi * (fx * dx + fy * dy))))


def hemisphere_scene(size=640, radius=40.0, height_scale=0.08, tilt=1.0,
                     slant=0.3, albedo=0.9, surround_albedo=0.0,
                     texture_amplitude=0.0, profile="cosine", seed=0):
    """Dome on a base plane, centered in the scene grid.

    `height_scale` is the peak height as a fraction of the radius. The
    default shallow raised-cosine profile keeps every slope inside the
    shading model's stable recovery envelope; `profile="spherical"` gives a
    (steep) hemi-ellipsoid for tests that need the full range of normals.
    """
    h, w = (size, size) if np.isscalar(size) else size
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    rr = np.hypot(xx - cx, yy - cy)
    u = np.minimum(rr / radius, 1.0)
    peak = height_scale * radius
    if profile == "cosine":
        dome = peak * 0.5 * (1.0 + np.cos(math.pi * u))
    elif profile == "spherical":
        dome = peak * np.sqrt(np.maximum(0.0, 1.0 - u ** 2))
    else:
        raise ValueError(f"unknown profile {profile!r}")
    height = np.where(rr < radius, dome, 0.0)

    albedo_map = np.where(rr < radius, albedo, surround_albedo)
    if texture_amplitude > 0:
        tex = band_limited_texture((h, w), seed=seed, scale=10.0, lo=-1.0, hi=1.0)
        albedo_map = np.clip(albedo_map * (1.0 + texture_amplitude * tex), 0.0, 1.0)
    return SyntheticScene(height, albedo_map, LightParams(tilt, slant, albedo),
                          texture_amplitude)


def bumps_scene(size=640, n_bumps=6, base_albedo=0.7, bump_height=3.0,
                bump_radius=55.0, tilt=1.0, slant=0.3,
                texture_amplitude=0.15, seed=0):
    """Several gentle raised-cosine bumps over a textured plane; the default
    scene for motion and stitching tests."""
    h, w = (size, size) if np.isscalar(size) else size
    rng = np.random.default_rng(seed)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    height = np.zeros((h, w))
    margin = min(bump_radius + 10, (min(h, w) - 1) / 2.0)
    for _ in range(n_bumps):
        cx = rng.uniform(margin, max(w - margin, margin + 1e-9))
        cy = rng.uniform(margin, max(h - margin, margin + 1e-9))
        rr = np.hypot(xx - cx, yy - cy)
        u = np.minimum(rr / bump_radius, 1.0)
        height += bump_height * 0.5 * (1.0 + np.cos(math.pi * u)) * (rr < bump_radius)
    albedo_map = np.full((h, w), base_albedo)
    if texture_amplitude > 0:
        tex = band_limited_texture((h, w), seed=seed + 1, scale=8.0, lo=-1.0, hi=1.0)
        albedo_map = np.clip(albedo_map * (1.0 + texture_amplitude * tex), 0.02, 1.0)
    return SyntheticScene(height, albedo_map, LightParams(tilt, slant, base_albedo),
                          texture_amplitude)


def scene_image(scene):
    """Shading of the full scene grid: I = albedo_map * max(0, N.S) with the
    same gradient discretization the depth recovery uses."""
    p, q = backward_differences(scene.height)
    unit = LightParams(scene.light.tilt, scene.light.slant, 1.0)
    return scene.albedo * np.maximum(0.0, reflectance(p, q, unit))


def render_lambertian(scene, view, dims):
    """Render the scene through a 2D view transform (frame -> world coords).

    Returns (image, ground-truth DepthMap for the same frame).
    """
    h, w = dims
    world = scene_image(scene)
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    pts = view.apply(np.c_[xx.ravel(), yy.ravel()])
    inside = ((pts[:, 0] >= 0) & (pts[:, 0] <= world.shape[1] - 1) &
              (pts[:, 1] >= 0) & (pts[:, 1] <= world.shape[0] - 1))
    if not inside.all():
        raise ValueError("view samples outside the scene grid")
    img, _ = sample_bilinear(world, pts[:, 0], pts[:, 1])
    z, _ = sample_bilinear(scene.height, pts[:, 0], pts[:, 1])
    img = img.reshape(h, w)
    z = z.reshape(h, w)
    p, q = backward_differences(z)
    return img, DepthMap(z, p, q)


def default_intrinsics(dims):
    """Synthetic pinhole for the degradation model: focal 0.8*min(dims),
    principal point at the frame center."""
    h, w = dims
    f = 0.8 * min(h, w)
    return CameraIntrinsics(fx=f, fy=f, cx=(w - 1) / 2.0, cy=(h - 1) / 2.0)


def degrade(img, cfg, seed=0, intrinsics=None):
    """Apply vignette, forward radial distortion, specular blobs and noise.

    Deterministic per seed; an all-off config returns the input unchanged.
    """
    out = np.asarray(img, dtype=np.float64).copy()
    h, w = out.shape[:2]
    rng = np.random.default_rng(seed)

    if cfg.vignette_a2 != 0.0 or cfg.vignette_a4 != 0.0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
        rr = np.hypot(xx - cx, yy - cy) / np.hypot(cx, cy)
        v = 1.0 + cfg.vignette_a2 * rr ** 2 + cfg.vignette_a4 * rr ** 4
        out = out * np.clip(v, 0.05, 1.5)

    if cfg.k1 != 0.0 or cfg.k2 != 0.0:
        K = intrinsics or default_intrinsics((h, w))
        K = CameraIntrinsics(K.fx, K.fy, K.cx, K.cy, k1=cfg.k1, k2=cfg.k2)
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        src = undistort_points(np.c_[xx.ravel(), yy.ravel()], K)
        vals, valid = sample_bilinear(out, src[:, 0], src[:, 1])
        out = np.where(valid, vals, 0.0).reshape(h, w)

    if cfg.specular_count > 0:
        yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
        for _ in range(cfg.specular_count):
            bx = rng.uniform(0.1 * w, 0.9 * w)
            by = rng.uniform(0.1 * h, 0.9 * h)
            br = rng.uniform(0.6, 1.4) * cfg.specular_radius
            rr = np.hypot(xx - bx, yy - by)
            # saturated disk with a ~2 px soft rim
            blob = cfg.specular_intensity * np.clip((br + 1.0 - rr) / 2.0, 0.0, 1.0)
            out = np.maximum(out, np.clip(blob, 0.0, 1.0))

    if cfg.noise_sigma > 0.0:
        out = out + rng.normal(0.0, cfg.noise_sigma, out.shape)

    return np.clip(out, 0.0, 1.0)


def traj_still(n_frames, origin):
    return [Transform2D.translation(origin[0], origin[1]) for _ in range(n_frames)]


def traj_pan(n_frames, origin, step=(6.0, 0.0)):
    return [Transform2D.translation(origin[0] + i * step[0], origin[1] + i * step[1])
            for i in range(n_frames)]


def traj_loop(n_frames, origin, leg=40.0):
    """Rectangular circuit: right, down, left, up back to the start."""
    per_leg = max(n_frames // 4, 1)
    pos = np.array(origin, dtype=np.float64)
    out = [Transform2D.translation(*pos)]
    deltas = ([( leg / per_leg, 0.0)] * per_leg + [(0.0,  leg / per_leg)] * per_leg +
              [(-leg / per_leg, 0.0)] * per_leg + [(0.0, -leg / per_leg)] * per_leg)
    for d in deltas[:n_frames - 1]:
        pos = pos + d
        out.append(Transform2D.translation(*pos))
    return out


@dataclass
class SequenceResult:
    frames: list
    timestamps: np.ndarray
    positions: np.ndarray           # (N, 3) ground-truth frame origins, z = 0
    depth: np.ndarray               # ground-truth height over the scene grid
    intrinsics: CameraIntrinsics
    views: list = field(default_factory=list)


def generate_sequence(scene, trajectory, cfg=None, dims=(200, 200), seed=0, fps=30.0):
    """Render one degraded frame per pose with exact TUM-style ground truth.

    Raises if any view leaves the scene grid, naming the offending index.
    """
    cfg = cfg or DegradationConfig()
    frames = []
    positions = []
    K = default_intrinsics(dims)
    for i, view in enumerate(trajectory):
        try:
            img, _ = render_lambertian(scene, view, dims)
        except ValueError as exc:
            raise ValueError(f"view {i} leaves the scene bounds: {exc}") from exc
        frames.append(degrade(img, cfg, seed=seed + i, intrinsics=K))
        positions.append([view.m[0, 2], view.m[1, 2], 0.0])
    timestamps = np.arange(len(frames)) / fps
    return SequenceResult(frames, timestamps, np.asarray(positions),
                          scene.height.copy(), K, list(trajectory))
