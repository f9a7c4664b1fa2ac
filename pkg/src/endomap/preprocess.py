"""Frame preprocessing: specular reflection detection and suppression,
Brown-Conrady undistortion and radial de-vignetting.

Each step is independently toggleable so ablation runs can switch any
combination on or off.
"""

from dataclasses import dataclass, field

import numpy as np
from scipy import ndimage

from .errors import NothingToAnchor
from .imgcore import (morph_close, sample_bilinear, sobel_gradients,
                      sobel_gradient_magnitude, to_grayscale)


@dataclass
class CameraIntrinsics:
    """Pinhole intrinsics with Brown-Conrady distortion coefficients."""

    fx: float
    fy: float
    cx: float
    cy: float
    k1: float = 0.0
    k2: float = 0.0
    k3: float = 0.0
    p1: float = 0.0
    p2: float = 0.0

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")

    def to_dict(self):
        return {k: float(getattr(self, k)) for k in
                ("fx", "fy", "cx", "cy", "k1", "k2", "k3", "p1", "p2")}

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: float(d[k]) for k in d})


_STEPS = ("reflection", "undistort", "devignette")


@dataclass
class PreprocessConfig:
    enable_reflection_suppression: bool = True
    enable_undistort: bool = False
    enable_devignette: bool = False
    closing_radius: int = 3
    inpaint_iterations: int = 400
    # default step order follows the reference processing chain; override
    # to study order sensitivity
    step_order: tuple = _STEPS

    def __post_init__(self):
        if self.closing_radius < 1 or self.inpaint_iterations < 1:
            raise ValueError("radii and iteration counts must be positive")
        self.step_order = tuple(self.step_order)
        if sorted(self.step_order) != sorted(_STEPS):
            raise ValueError(f"step_order must be a permutation of {_STEPS}")

    def to_dict(self):
        return {"enable_reflection_suppression": self.enable_reflection_suppression,
                "enable_undistort": self.enable_undistort,
                "enable_devignette": self.enable_devignette,
                "closing_radius": self.closing_radius,
                "inpaint_iterations": self.inpaint_iterations,
                "step_order": list(self.step_order)}

    @classmethod
    def from_dict(cls, d):
        return cls(**d)


def detect_specular_mask(gray, closing_radius=3):
    """Specular pixels = appearance branch AND closed shape branch.

    Appearance: intensity at least mean + std of the frame. Shape: the same
    adaptive threshold applied to the Sobel gradient map, then closed with a
    disk to fill the saturated blob interiors.
    """
    if gray.ndim != 2:
        raise ValueError("detect_specular_mask expects a grayscale image")
    empty = np.zeros(gray.shape, dtype=bool)
    if gray.std() < 1e-12:
        return empty
    appearance = gray >= gray.mean() + gray.std()
    grad = sobel_gradient_magnitude(gray)
    if grad.std() < 1e-12:
        return empty
    shape_raw = grad >= grad.mean() + grad.std()
    if not shape_raw.any():
        return empty
    shape = morph_close(shape_raw, closing_radius)
    return appearance & shape


def inpaint(img, mask, iterations=400, tol=1e-4):
    """Harmonic fill of masked pixels; unmasked pixels are untouched.

    Masked pixels start at the mean of their component's unmasked boundary
    ring, then Jacobi sweeps relax the Laplace equation over the masked
    region until `iterations` or until the largest update falls below tol.
    """
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != img.shape[:2]:
        raise ValueError("mask dimensions must match the image")
    if not mask.any():
        return img.copy()
    if mask.all():
        raise NothingToAnchor("every pixel is masked")

    if img.ndim == 3:
        out = img.copy()
        for c in range(img.shape[2]):
            out[:, :, c] = inpaint(img[:, :, c], mask, iterations, tol)
        return out

    out = img.copy()
    labels, n = ndimage.label(mask)
    for comp in range(1, n + 1):
        region = labels == comp
        ring = ndimage.binary_dilation(region) & ~mask
        out[region] = out[ring].mean() if ring.any() else img[~mask].mean()

    ys, xs = np.nonzero(mask)
    up = np.maximum(ys - 1, 0)
    down = np.minimum(ys + 1, img.shape[0] - 1)
    left = np.maximum(xs - 1, 0)
    right = np.minimum(xs + 1, img.shape[1] - 1)
    for _ in range(iterations):
        new = 0.25 * (out[up, xs] + out[down, xs] + out[ys, left] + out[ys, right])
        delta = np.abs(new - out[ys, xs]).max()
        out[ys, xs] = new
        if delta < tol:
            break
    return out


def distort_normalized(xn, yn, K):
    """Forward Brown-Conrady model on normalized coordinates."""
    r2 = xn * xn + yn * yn
    radial = 1.0 + K.k1 * r2 + K.k2 * r2 * r2 + K.k3 * r2 * r2 * r2
    xd = xn * radial + 2.0 * K.p1 * xn * yn + K.p2 * (r2 + 2.0 * xn * xn)
    yd = yn * radial + K.p1 * (r2 + 2.0 * yn * yn) + 2.0 * K.p2 * xn * yn
    return xd, yd


def undistort_points(points, K, iterations=8, tol=1e-8):
    """Invert the forward model for pixel coordinates via Newton iteration."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xd = (pts[:, 0] - K.cx) / K.fx
    yd = (pts[:, 1] - K.cy) / K.fy
    xn, yn = xd.copy(), yd.copy()
    eps = 1e-7
    for _ in range(iterations):
        fx_, fy_ = distort_normalized(xn, yn, K)
        ex, ey = fx_ - xd, fy_ - yd
        if max(np.abs(ex).max(initial=0.0), np.abs(ey).max(initial=0.0)) < tol:
            break
        # numeric 2x2 Jacobian of the forward model
        fxp, fyp = distort_normalized(xn + eps, yn, K)
        fxq, fyq = distort_normalized(xn, yn + eps, K)
        j11, j21 = (fxp - fx_) / eps, (fyp - fy_) / eps
        j12, j22 = (fxq - fx_) / eps, (fyq - fy_) / eps
        det = j11 * j22 - j12 * j21
        det = np.where(np.abs(det) < 1e-12, 1.0, det)
        xn -= (j22 * ex - j12 * ey) / det
        yn -= (j11 * ey - j21 * ex) / det
    out = np.empty_like(pts)
    out[:, 0] = xn * K.fx + K.cx
    out[:, 1] = yn * K.fy + K.cy
    return out


def distort_points(points, K):
    """Forward Brown-Conrady model for pixel coordinates."""
    pts = np.asarray(points, dtype=np.float64).reshape(-1, 2)
    xn = (pts[:, 0] - K.cx) / K.fx
    yn = (pts[:, 1] - K.cy) / K.fy
    xd, yd = distort_normalized(xn, yn, K)
    out = np.empty_like(pts)
    out[:, 0] = xd * K.fx + K.cx
    out[:, 1] = yd * K.fy + K.cy
    return out


def undistort(img, K):
    """Inverse-warp undistortion.

    Every output pixel is pushed through the forward distortion model and the
    input is sampled there bilinearly. Returns (image, validity mask); samples
    falling outside the input become 0 and invalid.
    """
    h, w = img.shape[:2]
    if not (0 <= K.cx <= w - 1 and 0 <= K.cy <= h - 1):
        raise ValueError("principal point lies outside the image")
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    xn = (xx - K.cx) / K.fx
    yn = (yy - K.cy) / K.fy
    xd, yd = distort_normalized(xn, yn, K)
    sx = xd * K.fx + K.cx
    sy = yd * K.fy + K.cy
    values, valid = sample_bilinear(img, sx, sy)
    if img.ndim == 3:
        values = np.where(valid[..., None], values, 0.0)
    else:
        values = np.where(valid, values, 0.0)
    return values, valid


@dataclass
class DevignetteResult:
    image: np.ndarray
    vignette: np.ndarray
    coefficients: tuple            # (a2, a4, a6) of V(r) = 1 + a2 r^2 + a4 r^4 + a6 r^6
    degenerate: bool = False


def _radial_profile_fit(gray, valid=None, n_bins=48, grad_floor=1e-4):
    """Fit vignette coefficients from binned mean radial log-gradients.

    On a vignette-free image the radial log-intensity gradients average to
    zero in every annulus (inward and outward slopes mirror each other); a
    vignette adds the systematic trend d(log V)/dr, which we fit and invert.
    """
    h, w = gray.shape
    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rmax = np.hypot(cx, cy)
    rr = np.hypot(xx - cx, yy - cy) / rmax

    # dead/saturated pixels break the log statistics; exclude them and a
    # guard ring wide enough to cover interpolation smear
    usable = (gray > 0.02) & (gray < 0.98)
    if valid is not None:
        usable &= np.asarray(valid, dtype=bool)
    usable = ndimage.binary_erosion(usable, iterations=3, border_value=1)

    log_img = np.log(np.maximum(gray, 1e-4))
    gx, gy = sobel_gradients(log_img)
    gx, gy = gx / 8.0, gy / 8.0          # kernel gain -> per-pixel derivative
    with np.errstate(invalid="ignore", divide="ignore"):
        ux = np.where(rr > 0, (xx - cx) / (rr * rmax), 0.0)
        uy = np.where(rr > 0, (yy - cy) / (rr * rmax), 0.0)
    grad_r = (gx * ux + gy * uy) * rmax   # d log I / d r_normalized

    edges = np.linspace(0.05, 1.0, n_bins + 1)
    mids, means = [], []
    for lo, hi in zip(edges[:-1], edges[1:]):
        sel = (rr >= lo) & (rr < hi) & usable
        if sel.sum() > 8:
            mids.append(0.5 * (lo + hi))
            means.append(grad_r[sel].mean())
    if len(mids) < 6:
        return None
    mids = np.asarray(mids)
    means = np.asarray(means)
    if np.sqrt(np.mean(means ** 2)) < grad_floor:
        return None

    # log V(r) = b2 r^2 + b4 r^4 + b6 r^6  =>  dlogV/dr linear in (b2, b4, b6)
    A = np.stack([2.0 * mids, 4.0 * mids ** 3, 6.0 * mids ** 5], axis=1)
    coeffs, *_ = np.linalg.lstsq(A, means, rcond=None)
    return coeffs


def devignette(img, valid=None):
    """Divide out a fitted radial attenuation; see DevignetteResult.

    The fitted vignette is constrained positive and at most 1 at the corners
    by shrinking the coefficients toward zero if needed. Pixels outside
    `valid` are ignored during fitting (but still divided).
    """
    gray = to_grayscale(img) if img.ndim == 3 else img
    h, w = gray.shape
    coeffs = _radial_profile_fit(gray, valid)
    if coeffs is None:
        return DevignetteResult(img.copy(), np.ones((h, w)), (0.0, 0.0, 0.0), True)

    b2, b4, b6 = coeffs
    rs = np.linspace(0.0, 1.0, 128)

    def v_of(scale, r):
        logv = scale * (b2 * r ** 2 + b4 * r ** 4 + b6 * r ** 6)
        return np.exp(logv)

    scale = 1.0
    for _ in range(40):
        v = v_of(scale, rs)
        if v.max() <= 1.0 + 1e-9 and v.min() >= 0.05:
            break
        scale *= 0.85
    else:
        scale = 0.0

    cy, cx = (h - 1) / 2.0, (w - 1) / 2.0
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    rr = np.hypot(xx - cx, yy - cy) / np.hypot(cx, cy)
    vignette = v_of(scale, rr)
    # report as the polynomial expansion of the fitted field
    a = np.polyfit(rs ** 2, v_of(scale, rs) - 1.0, 3)
    poly_coeffs = (float(a[2]), float(a[1]), float(a[0]))

    if img.ndim == 3:
        corrected = np.clip(img / vignette[:, :, None], 0.0, 1.0)
    else:
        corrected = np.clip(img / vignette, 0.0, 1.0)
    return DevignetteResult(corrected, vignette, poly_coeffs, False)


def preprocess_frame(img, config, intrinsics=None):
    """Run the enabled steps in the paper's order: reflection removal,
    undistortion, de-vignetting. Returns (image, specular mask, valid mask).

    Near-black bands in the input (dead capture borders) are marked invalid
    up front and the flag is carried through the undistortion warp.
    """
    gray = to_grayscale(img)
    h, w = gray.shape
    mask = np.zeros((h, w), dtype=bool)
    valid = np.ones((h, w), dtype=bool)
    content = gray > 1e-3
    if not content.all():
        valid = ndimage.binary_erosion(content, iterations=3, border_value=1)
    out = img

    for step in config.step_order:
        if step == "reflection" and config.enable_reflection_suppression:
            mask = detect_specular_mask(to_grayscale(out), config.closing_radius)
            if mask.any() and not mask.all():
                out = inpaint(out, mask, config.inpaint_iterations)
        elif step == "undistort" and config.enable_undistort:
            if intrinsics is None:
                raise ValueError("undistortion enabled but no intrinsics supplied")
            out, warp_ok = undistort(out, intrinsics)
            vmap, _ = undistort(valid.astype(np.float64), intrinsics)
            valid = warp_ok & (vmap > 0.999)
            mask, _ = undistort(mask.astype(np.float64), intrinsics)
            mask = mask > 0.5
        elif step == "devignette" and config.enable_devignette:
            out = devignette(out, valid).image
    return out, mask, valid
