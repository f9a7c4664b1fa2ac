import numpy as np
import pytest

from endomap.evaluate import (Trajectory, ade_rmse, apply_similarity, associate,
                              ate_rmse, icp_align, reprojection_error,
                              umeyama_alignment)
from endomap.preprocess import CameraIntrinsics
from endomap.synth import shift_image_periodic


def make_traj(positions, t0=0.0, dt=1 / 30):
    positions = np.asarray(positions, float)
    ts = t0 + dt * np.arange(len(positions))
    return Trajectory(ts, positions)


def rotation_about(axis, angle):
    axis = np.asarray(axis, float)
    axis = axis / np.linalg.norm(axis)
    K = np.array([[0, -axis[2], axis[1]],
                  [axis[2], 0, -axis[0]],
                  [-axis[1], axis[0], 0]])
    return np.eye(3) + np.sin(angle) * K + (1 - np.cos(angle)) * (K @ K)


class TestTrajectory:
    def test_monotone_timestamps_required(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 0.0], np.zeros((2, 3)))

    def test_unit_quaternions_required(self):
        with pytest.raises(ValueError):
            Trajectory([0.0, 1.0], np.zeros((2, 3)),
                       np.array([[0, 0, 0, 2.0], [0, 0, 0, 1.0]]))

    def test_association_window(self):
        a = make_traj(np.zeros((5, 3)))
        b = Trajectory(a.timestamps + 0.005, np.zeros((5, 3)))
        assert len(associate(a, b, window=0.02)) == 5
        assert len(associate(a, b, window=0.001)) == 0


class TestAteRmse:
    def test_identical_zero(self, rng):
        traj = make_traj(rng.normal(size=(20, 3)))
        assert ate_rmse(traj, traj) < 1e-12

    def test_rigid_offset_absorbed(self, rng):
        gt = make_traj(rng.normal(size=(20, 3)) * 10)
        est = make_traj(gt.positions + [3.0, 0.0, 0.0])
        assert ate_rmse(est, gt) < 1e-9

    def test_rigid_invariance_full_transform(self, rng):
        gt = make_traj(rng.normal(size=(30, 3)) * 5)
        R = rotation_about([0.3, 1.0, -0.2], 0.7)
        est = make_traj((R @ gt.positions.T).T + [1.0, -2.0, 0.5])
        assert ate_rmse(est, gt, with_scale=False) < 1e-9
        assert ate_rmse(est, gt, with_scale=True) < 1e-9

    def test_isotropic_noise_monte_carlo(self, rng):
        # expected RMSE for sigma = 0.5 per axis is 0.5 * sqrt(3)
        gt = make_traj(rng.normal(size=(100, 3)) * 20)
        noisy = make_traj(gt.positions + rng.normal(0, 0.5, (100, 3)))
        val = ate_rmse(noisy, gt)
        expected = 0.5 * np.sqrt(3)
        assert abs(val - expected) / expected < 0.15

    def test_too_few_pairs_raises(self):
        a = make_traj(np.zeros((1, 3)))
        with pytest.raises(ValueError):
            ate_rmse(a, a)


class TestUmeyama:
    def test_recovers_similarity(self, rng):
        src = rng.normal(size=(50, 3))
        R = rotation_about([0, 0, 1], 0.4)
        dst = 1.7 * (R @ src.T).T + [2.0, -1.0, 3.0]
        s, R_est, t = umeyama_alignment(src, dst)
        assert abs(s - 1.7) < 1e-9
        assert np.abs(R_est - R).max() < 1e-9
        assert np.abs(t - [2.0, -1.0, 3.0]).max() < 1e-9


class TestIcp:
    def structured_cloud(self, rng, n=400):
        pts = rng.uniform(-10, 10, (n, 2))
        z = 0.05 * pts[:, 0] ** 2 - 0.03 * pts[:, 1] ** 2
        return np.c_[pts, z]

    def test_identical_clouds(self, rng):
        cloud = self.structured_cloud(rng)
        (s, R, t), residual = icp_align(cloud, cloud)
        assert residual < 1e-9
        assert abs(s - 1.0) < 1e-9
        assert np.abs(R - np.eye(3)).max() < 1e-9

    def test_recovers_constructed_transform(self, rng):
        cloud = self.structured_cloud(rng)
        R = rotation_about([0.0, 0.0, 1.0], np.deg2rad(10.0))
        moved = (R @ cloud.T).T + [1.0, 2.0, 3.0]
        (s, R_est, t), residual = icp_align(moved, cloud, max_iters=200)
        assert residual < 1e-6
        aligned = apply_similarity(moved, s, R_est, t)
        assert np.abs(aligned - cloud).max() < 1e-5

    def test_residual_non_increasing(self, rng):
        cloud = self.structured_cloud(rng)
        R = rotation_about([0, 0, 1], np.deg2rad(8))
        moved = (R @ cloud.T).T + [0.5, -0.5, 1.0]
        residuals = []
        for iters in (1, 3, 6, 12, 30):
            _, res = icp_align(moved, cloud, max_iters=iters)
            residuals.append(res)
        assert all(residuals[i + 1] <= residuals[i] + 1e-9
                   for i in range(len(residuals) - 1))

    def test_partial_overlap_noise_in_band(self, rng):
        cloud = self.structured_cloud(rng, n=600)
        sigma = 0.05
        half = cloud[cloud[:, 0] > 0]         # ~50% overlap
        noisy = half + rng.normal(0, sigma, half.shape)
        (s, R, t), residual = icp_align(noisy, cloud)
        assert sigma <= residual <= 3 * sigma

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            icp_align(np.zeros((0, 3)), np.ones((5, 3)))


class TestAdeRmse:
    def test_identity_zero(self, rng):
        cloud = rng.normal(size=(100, 3))
        assert ade_rmse(cloud, cloud) == 0.0

    def test_plane_offset_along_normal(self):
        gy, gx = np.mgrid[0:20, 0:20].astype(float)
        plane = np.c_[gx.ravel(), gy.ravel(), np.zeros(400)]
        lifted = plane + [0.0, 0.0, 0.5]
        assert abs(ade_rmse(lifted, plane) - 0.5) < 1e-9

    def test_empty_raises(self):
        with pytest.raises(ValueError):
            ade_rmse(np.zeros((0, 3)), np.zeros((4, 3)))


class TestReprojectionError:
    def test_identical_frames(self, textured_small):
        err = reprojection_error(textured_small, textured_small)
        assert err < 0.05

    def test_shift_pair_dense(self, textured):
        f2 = shift_image_periodic(textured, 5, 0)
        err = reprojection_error(textured, f2, matcher="dense")
        assert err <= 0.3

    def test_sparse_within_factor_two_of_dense(self, textured):
        f2 = shift_image_periodic(textured, 5, 0)
        dense = reprojection_error(textured, f2, matcher="dense")
        sparse = reprojection_error(textured, f2, matcher="sparse")
        assert sparse <= max(2.0 * dense, 0.1)

    def test_with_intrinsics_undistorted_coords(self, textured):
        K = CameraIntrinsics(fx=200.0, fy=200.0, cx=127.5, cy=127.5, k1=-0.05)
        f2 = shift_image_periodic(textured, 3, 2)
        err = reprojection_error(textured, f2, K=K)
        assert err < 0.5

    def test_unknown_matcher(self, textured_small):
        with pytest.raises(ValueError):
            reprojection_error(textured_small, textured_small, matcher="orb")
