import numpy as np
import pytest

from endomap import fileio
from endomap.register import Transform2D


def test_png_round_trip(tmp_path, rng):
    img = rng.random((12, 16))
    path = tmp_path / "img.png"
    fileio.save_image(path, img)
    back = fileio.load_image(path)
    assert back.shape == img.shape
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_png_color_round_trip(tmp_path, rng):
    img = rng.random((8, 8, 3))
    path = tmp_path / "img.png"
    fileio.save_image(path, img)
    back = fileio.load_image(path)
    assert back.shape == (8, 8, 3)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_pgm_round_trip(tmp_path, rng):
    img = rng.random((9, 7))
    path = tmp_path / "img.pgm"
    fileio.save_image(path, img)
    back = fileio.load_image(path)
    assert np.abs(back - img).max() <= 0.5 / 255 + 1e-9


def test_pfm_round_trip_exact_float32(tmp_path, rng):
    img = rng.random((11, 13)).astype(np.float32).astype(np.float64)
    path = tmp_path / "img.pfm"
    fileio.write_pfm(path, img)
    back = fileio.read_pfm(path)
    assert np.array_equal(back, img)


def test_pfm_color(tmp_path, rng):
    img = rng.random((5, 6, 3)).astype(np.float32).astype(np.float64)
    path = tmp_path / "img.pfm"
    fileio.write_pfm(path, img)
    assert np.array_equal(fileio.read_pfm(path), img)


def test_flow_pfm(tmp_path, rng):
    u = rng.normal(size=(6, 6)).astype(np.float32).astype(np.float64)
    v = rng.normal(size=(6, 6)).astype(np.float32).astype(np.float64)
    path = tmp_path / "flow.pfm"
    fileio.write_flow_pfm(path, u, v)
    bu, bv = fileio.read_flow_pfm(path)
    assert np.array_equal(bu, u) and np.array_equal(bv, v)


def test_ply_round_trip(tmp_path, rng):
    pts = rng.normal(size=(20, 3))
    path = tmp_path / "cloud.ply"
    fileio.write_ply(path, pts)
    back = fileio.read_ply(path)
    assert np.abs(back - pts).max() < 1e-5


def test_tum_round_trip(tmp_path):
    ts = np.array([0.0, 1 / 30, 2 / 30])
    pos = np.arange(9, dtype=float).reshape(3, 3)
    quat = np.tile([0.0, 0.0, 0.0, 1.0], (3, 1))
    path = tmp_path / "traj.txt"
    fileio.write_tum(path, ts, pos, quat)
    bt, bp, bq = fileio.read_tum(path)
    assert np.allclose(bt, ts, atol=1e-6)
    assert np.allclose(bp, pos, atol=1e-6)
    assert np.allclose(bq, quat, atol=1e-6)


def test_manifest_round_trip(tmp_path):
    path = tmp_path / "kf.txt"
    fileio.write_manifest(path, [0, 4, 8, 15])
    assert fileio.read_manifest(path) == [0, 4, 8, 15]


def test_poses_round_trip(tmp_path):
    transforms = [Transform2D.translation(3.5, -2.0),
                  Transform2D.from_affine_params(1.01, 0.02, -0.01, 0.99, 5.0, 7.0)]
    path = tmp_path / "poses.txt"
    fileio.write_poses(path, transforms)
    mats = fileio.read_poses(path)
    for t, m in zip(transforms, mats):
        assert np.allclose(t.m, m, atol=1e-7)


def test_read_tum_rejects_empty(tmp_path):
    path = tmp_path / "empty.txt"
    path.write_text("# header only\n")
    with pytest.raises(ValueError):
        fileio.read_tum(path)
