"""Raster container conventions and pixel-level primitives.

Images are numpy float64 arrays in [0, 1], shape (H, W) for grayscale or
(H, W, 3) for color. Boolean arrays of shape (H, W) serve as bit masks.
Coordinates are (x, y) = (column, row); pixel (x, y) lives at array[y, x].
"""

import numpy as np
from scipy import ndimage

from .errors import TooManyLevels

# 3x3 Sobel response of a unit step is bounded by 4 per axis
_SOBEL_MAX = 4.0 * np.sqrt(2.0)
_BINOMIAL5 = np.array([1.0, 4.0, 6.0, 4.0, 1.0]) / 16.0


def as_image(data):
    """Validate and clamp raw data into the image convention.

    Accepts (H, W), (H, W, 1) or (H, W, 3) input; non-finite values other
    than +/-inf are rejected, everything is clamped to [0, 1].
    """
    img = np.asarray(data, dtype=np.float64)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[:, :, 0]
    if img.ndim not in (2, 3) or (img.ndim == 3 and img.shape[2] != 3):
        raise ValueError(f"expected (H,W) or (H,W,3) raster, got shape {img.shape}")
    if np.isnan(img).any():
        raise ValueError("image contains NaN")
    return np.clip(img, 0.0, 1.0)


def channel_count(img):
    return 1 if img.ndim == 2 else img.shape[2]


def to_grayscale(img):
    """Rec.601 luma; single-channel input passes through unchanged."""
    if img.ndim == 2:
        return img
    luma = 0.299 * img[:, :, 0] + 0.587 * img[:, :, 1] + 0.114 * img[:, :, 2]
    return np.clip(luma, 0.0, 1.0)


def sobel_gradients(img):
    """Raw 3x3 Sobel responses (gx, gy) with replicate borders."""
    kd = np.array([-1.0, 0.0, 1.0])
    ks = np.array([1.0, 2.0, 1.0])
    gx = ndimage.correlate1d(img, kd, axis=1, mode="nearest")
    gx = ndimage.correlate1d(gx, ks, axis=0, mode="nearest")
    gy = ndimage.correlate1d(img, kd, axis=0, mode="nearest")
    gy = ndimage.correlate1d(gy, ks, axis=1, mode="nearest")
    return gx, gy


def sobel_gradient_magnitude(img):
    """Per-pixel Sobel magnitude rescaled to [0, 1] by the theoretical maximum."""
    if img.ndim != 2:
        raise ValueError("sobel_gradient_magnitude expects a single-channel image")
    gx, gy = sobel_gradients(img)
    return np.hypot(gx, gy) / _SOBEL_MAX


def disk_element(radius):
    """Boolean disk structuring element of the given pixel radius."""
    if radius < 1:
        raise ValueError("radius must be >= 1")
    r = int(radius)
    yy, xx = np.mgrid[-r:r + 1, -r:r + 1]
    return (xx * xx + yy * yy) <= radius * radius


def morph_close(mask, radius):
    """Dilation followed by erosion with a disk element.

    Computed on a zero-padded copy wide enough that the result matches
    closing on an unbounded grid (keeps the operation extensive and
    idempotent near borders).
    """
    mask = np.asarray(mask, dtype=bool)
    disk = disk_element(radius)
    pad = 2 * int(radius) + 1
    padded = np.pad(mask, pad, mode="constant", constant_values=False)
    closed = ndimage.binary_closing(padded, structure=disk)
    return closed[pad:-pad, pad:-pad]


def _blur5(img):
    out = ndimage.correlate1d(img, _BINOMIAL5, axis=0, mode="nearest")
    return ndimage.correlate1d(out, _BINOMIAL5, axis=1, mode="nearest")


def _check_levels(img, levels):
    if levels < 1:
        raise ValueError("levels must be >= 1")
    if min(img.shape[0], img.shape[1]) / 2 ** (levels - 1) < 2:
        raise TooManyLevels(
            f"{levels} levels infeasible for {img.shape[1]}x{img.shape[0]} image")


def downsample2(img):
    """Binomial blur then decimation by 2 (keeps even rows/cols)."""
    return _blur5(img)[::2, ::2]


def upsample2(img, out_shape):
    """Bilinear upsample aligned with downsample2 (fine pixel i -> coarse i/2)."""
    ys = np.minimum(np.arange(out_shape[0]) / 2.0, img.shape[0] - 1.0)
    xs = np.minimum(np.arange(out_shape[1]) / 2.0, img.shape[1] - 1.0)
    grid = np.meshgrid(ys, xs, indexing="ij")
    if img.ndim == 2:
        return ndimage.map_coordinates(img, grid, order=1, mode="nearest")
    chans = [ndimage.map_coordinates(img[:, :, c], grid, order=1, mode="nearest")
             for c in range(img.shape[2])]
    return np.stack(chans, axis=-1)


def gaussian_pyramid(img, levels):
    """Level 0 is the input, each further level blurred and decimated by 2."""
    _check_levels(img, levels)
    pyr = [np.asarray(img, dtype=np.float64)]
    for _ in range(levels - 1):
        pyr.append(downsample2(pyr[-1]))
    return pyr


def laplacian_pyramid(img, levels):
    """Band i = gaussian[i] - upsample(gaussian[i+1]); last band is the coarsest gaussian."""
    gauss = gaussian_pyramid(img, levels)
    bands = []
    for i in range(levels - 1):
        bands.append(gauss[i] - upsample2(gauss[i + 1], gauss[i].shape[:2]))
    bands.append(gauss[-1])
    return bands


def collapse_pyramid(bands):
    """Inverse of laplacian_pyramid (exact round trip)."""
    img = bands[-1]
    for band in bands[-2::-1]:
        img = upsample2(img, band.shape[:2]) + band
    return img


def nearest_valid_fill(img, mask):
    """Replace pixels outside `mask` with their nearest valid neighbor."""
    mask = np.asarray(mask, dtype=bool)
    if mask.all():
        return img
    if not mask.any():
        return img
    _, (iy, ix) = ndimage.distance_transform_edt(~mask, return_indices=True)
    return img[iy, ix]


def sample_bilinear(img, x, y):
    """Bilinear sample at sub-pixel (x, y); out-of-support samples are flagged invalid.

    Returns (values, valid). The support is [0, W-1] x [0, H-1]. For color
    images values gain a trailing channel axis.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    h, w = img.shape[:2]
    valid = (x >= 0.0) & (x <= w - 1.0) & (y >= 0.0) & (y <= h - 1.0)

    cx = np.clip(x, 0.0, w - 1.0)
    cy = np.clip(y, 0.0, h - 1.0)
    x0 = np.clip(np.floor(cx).astype(np.intp), 0, max(w - 2, 0))
    y0 = np.clip(np.floor(cy).astype(np.intp), 0, max(h - 2, 0))
    x1 = np.minimum(x0 + 1, w - 1)
    y1 = np.minimum(y0 + 1, h - 1)
    fx = cx - x0
    fy = cy - y0
    if img.ndim == 3:
        fx = fx[..., None]
        fy = fy[..., None]

    top = img[y0, x0] * (1.0 - fx) + img[y0, x1] * fx
    bot = img[y1, x0] * (1.0 - fx) + img[y1, x1] * fx
    values = top * (1.0 - fy) + bot * fy
    return values, valid
