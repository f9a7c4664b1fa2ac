"""File formats: PNG/PGM images, PFM float rasters, ASCII PLY clouds,
TUM trajectories, keyframe manifests and pose tables."""

import numpy as np
from PIL import Image as PILImage

from .imgcore import as_image


def load_image(path):
    """Load PNG/PGM (8/16-bit) or PFM into a float image in [0, 1] (PFM unscaled)."""
    path = str(path)
    if path.lower().endswith(".pfm"):
        return read_pfm(path)
    with PILImage.open(path) as im:
        if im.mode in ("RGBA", "P"):
            im = im.convert("RGB")
        arr = np.asarray(im)
    if arr.dtype == np.uint8:
        arr = arr / 255.0
    elif arr.dtype == np.uint16 or arr.dtype == np.int32:
        arr = arr / float(arr.max() if arr.max() > 255 else 255)
    if arr.ndim == 3 and arr.shape[2] > 3:
        arr = arr[:, :, :3]
    return as_image(arr)


def save_image(path, img):
    """Save to PNG/PGM (8-bit) or PFM (float32) depending on extension."""
    path = str(path)
    if path.lower().endswith(".pfm"):
        write_pfm(path, img)
        return
    img = np.asarray(img, dtype=np.float64)
    data = np.clip(np.rint(img * 255.0), 0, 255).astype(np.uint8)
    PILImage.fromarray(data).save(path)


def read_pfm(path):
    """Read a PFM raster (gray 'Pf' or color 'PF'); rows are stored bottom-up."""
    with open(path, "rb") as fh:
        header = fh.readline().strip()
        if header not in (b"PF", b"Pf"):
            raise ValueError(f"not a PFM file: {path}")
        color = header == b"PF"
        dims = fh.readline().split()
        width, height = int(dims[0]), int(dims[1])
        scale = float(fh.readline().strip())
        endian = "<" if scale < 0 else ">"
        count = width * height * (3 if color else 1)
        data = np.frombuffer(fh.read(count * 4), dtype=endian + "f4", count=count)
    shape = (height, width, 3) if color else (height, width)
    return np.flipud(data.reshape(shape)).astype(np.float64)


def write_pfm(path, img):
    img = np.asarray(img, dtype=np.float32)
    if img.ndim == 2:
        header = b"Pf"
    elif img.ndim == 3 and img.shape[2] == 3:
        header = b"PF"
    else:
        raise ValueError("PFM supports (H,W) or (H,W,3) rasters")
    h, w = img.shape[:2]
    with open(path, "wb") as fh:
        fh.write(header + b"\n")
        fh.write(f"{w} {h}\n".encode())
        fh.write(b"-1.0\n")
        fh.write(np.flipud(img).astype("<f4").tobytes())


def write_flow_pfm(path, u, v):
    """Flow dump as a 3-channel PFM with a zero third channel."""
    stacked = np.stack([u, v, np.zeros_like(u)], axis=-1)
    write_pfm(path, stacked)


def read_flow_pfm(path):
    data = read_pfm(path)
    return data[:, :, 0], data[:, :, 1]


def write_ply(path, points):
    """ASCII PLY, vertices only."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    with open(path, "w") as fh:
        fh.write("ply\nformat ascii 1.0\n")
        fh.write(f"element vertex {len(points)}\n")
        fh.write("property float x\nproperty float y\nproperty float z\n")
        fh.write("end_header\n")
        for x, y, z in points:
            fh.write(f"{x:.6f} {y:.6f} {z:.6f}\n")


def read_ply(path):
    with open(path) as fh:
        line = fh.readline().strip()
        if line != "ply":
            raise ValueError(f"not a PLY file: {path}")
        n = 0
        while True:
            line = fh.readline()
            if not line:
                raise ValueError("PLY header ended prematurely")
            if line.startswith("element vertex"):
                n = int(line.split()[-1])
            if line.strip() == "end_header":
                break
        pts = np.loadtxt(fh, max_rows=n, dtype=np.float64)
    return pts.reshape(-1, 3)


def write_tum(path, timestamps, positions, quaternions=None):
    """TUM format: timestamp tx ty tz qx qy qz qw per line."""
    timestamps = np.asarray(timestamps, dtype=np.float64)
    positions = np.asarray(positions, dtype=np.float64).reshape(-1, 3)
    if quaternions is None:
        quaternions = np.tile([0.0, 0.0, 0.0, 1.0], (len(timestamps), 1))
    quaternions = np.asarray(quaternions, dtype=np.float64).reshape(-1, 4)
    with open(path, "w") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for t, p, q in zip(timestamps, positions, quaternions):
            fh.write(f"{t:.6f} {p[0]:.6f} {p[1]:.6f} {p[2]:.6f} "
                     f"{q[0]:.6f} {q[1]:.6f} {q[2]:.6f} {q[3]:.6f}\n")


def read_tum(path):
    """Returns (timestamps (N,), positions (N,3), quaternions (N,4))."""
    rows = []
    with open(path) as fh:
        for line in fh:
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            vals = [float(v) for v in line.replace(",", " ").split()]
            if len(vals) < 4:
                continue
            while len(vals) < 8:
                vals.append(0.0)
            rows.append(vals[:8])
    if not rows:
        raise ValueError(f"no trajectory rows in {path}")
    arr = np.asarray(rows, dtype=np.float64)
    quats = arr[:, 4:8]
    norms = np.linalg.norm(quats, axis=1)
    quats[norms < 1e-12] = [0.0, 0.0, 0.0, 1.0]
    return arr[:, 0], arr[:, 1:4], quats


def write_manifest(path, indices):
    with open(path, "w") as fh:
        for idx in indices:
            fh.write(f"{int(idx)}\n")


def read_manifest(path):
    with open(path) as fh:
        return [int(line) for line in fh if line.strip()]


def write_poses(path, transforms):
    """One 3x3 transform per line, row-major."""
    with open(path, "w") as fh:
        for t in transforms:
            m = np.asarray(t.m if hasattr(t, "m") else t, dtype=np.float64)
            fh.write(" ".join(f"{v:.9g}" for v in m.reshape(9)) + "\n")


def read_poses(path):
    mats = np.loadtxt(path, dtype=np.float64).reshape(-1, 3, 3)
    return [m for m in mats]
