"""Camera model, poses, and trajectory file round-trips."""

import numpy as np
import pytest

from crossia import (
    CameraIntrinsics,
    CameraPose,
    FormatError,
    InvalidArgument,
    Trajectory,
    backproject,
    load_trajectory,
    look_at_pose,
    pixel_ray_directions,
    save_trajectory,
)


class TestCameraIntrinsics:
    def test_principal_point_inside_image(self):
        with pytest.raises(InvalidArgument):
            CameraIntrinsics(width=64, height=48, fx=50.0, fy=50.0,
                             cx=64.0, cy=10.0)

    def test_positive_focal(self):
        with pytest.raises(InvalidArgument):
            CameraIntrinsics(width=64, height=48, fx=0.0, fy=50.0,
                             cx=32.0, cy=24.0)


class TestCameraPose:
    def test_quaternion_must_be_unit(self):
        with pytest.raises(InvalidArgument):
            CameraPose(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.001]))

    def test_identity_rotation(self):
        np.testing.assert_allclose(CameraPose.identity().rotation, np.eye(3),
                                   atol=1e-12)


class TestLookAtPose:
    def test_forward_axis_points_at_target(self):
        rng = np.random.default_rng(9)
        for _ in range(20):
            eye = rng.uniform(-2, 2, size=3)
            target = rng.uniform(-2, 2, size=3)
            if np.linalg.norm(target - eye) < 1e-3:
                continue
            pose = look_at_pose(eye, target)
            forward = pose.rotation[:, 2]
            expect = (target - eye) / np.linalg.norm(target - eye)
            np.testing.assert_allclose(forward, expect, atol=1e-9)

    def test_rotation_is_orthonormal(self):
        pose = look_at_pose([1.0, -2.0, 1.5], [0.0, 0.0, 0.5])
        r = pose.rotation
        np.testing.assert_allclose(r @ r.T, np.eye(3), atol=1e-12)
        assert np.linalg.det(r) == pytest.approx(1.0)


class TestPixelRays:
    def test_unit_z_component(self):
        intr = CameraIntrinsics(width=17, height=13, fx=30.0, fy=40.0,
                                cx=8.0, cy=6.0)
        dirs = pixel_ray_directions(intr)
        assert dirs.shape == (13, 17, 3)
        np.testing.assert_array_equal(dirs[..., 2], 1.0)

    def test_principal_point_ray_is_optical_axis(self):
        intr = CameraIntrinsics(width=17, height=13, fx=30.0, fy=40.0,
                                cx=8.0, cy=6.0)
        dirs = pixel_ray_directions(intr)
        np.testing.assert_allclose(dirs[6, 8], [0.0, 0.0, 1.0], atol=1e-12)

    def test_pinhole_slopes(self):
        intr = CameraIntrinsics(width=9, height=9, fx=10.0, fy=20.0,
                                cx=4.0, cy=4.0)
        dirs = pixel_ray_directions(intr)
        assert dirs[4, 8, 0] == pytest.approx((8 - 4) / 10.0)
        assert dirs[8, 4, 1] == pytest.approx((8 - 4) / 20.0)


class TestBackproject:
    def test_depth_one_recovers_ray_offsets(self):
        intr = CameraIntrinsics(width=5, height=5, fx=10.0, fy=10.0,
                                cx=2.0, cy=2.0)
        depth = np.ones((5, 5))
        pts = backproject(depth, CameraPose.identity(), intr)
        np.testing.assert_allclose(pts[2, 2], [0.0, 0.0, 1.0], atol=1e-12)
        np.testing.assert_allclose(pts[2, 4], [0.2, 0.0, 1.0], atol=1e-12)

    def test_pose_translation_applies(self):
        intr = CameraIntrinsics(width=3, height=3, fx=5.0, fy=5.0,
                                cx=1.0, cy=1.0)
        pose = CameraPose(np.array([1.0, 2.0, 3.0]),
                          np.array([0.0, 0.0, 0.0, 1.0]))
        pts = backproject(np.full((3, 3), 2.0), pose, intr)
        np.testing.assert_allclose(pts[1, 1], [1.0, 2.0, 5.0], atol=1e-12)


class TestTrajectoryFile:
    def _trajectory(self):
        poses = [look_at_pose([2.0, 0.0, 1.0], [0.0, 0.0, 0.5]),
                 look_at_pose([0.0, 2.0, 1.2], [0.0, 0.0, 0.5])]
        return Trajectory(timestamps=[0.0, 0.2], poses=poses)

    def test_roundtrip(self, tmp_path):
        traj = self._trajectory()
        save_trajectory(traj, tmp_path / "traj.txt")
        loaded = load_trajectory(tmp_path / "traj.txt")
        assert loaded.timestamps == pytest.approx(traj.timestamps)
        for pa, pb in zip(traj.poses, loaded.poses):
            np.testing.assert_allclose(pa.position, pb.position, atol=1e-8)
            np.testing.assert_allclose(pa.quaternion, pb.quaternion,
                                       atol=1e-8)

    def test_comment_and_blank_lines_skipped(self, tmp_path):
        path = tmp_path / "traj.txt"
        save_trajectory(self._trajectory(), path)
        text = path.read_text()
        path.write_text("# extra comment\n\n" + text)
        assert len(load_trajectory(path)) == 2

    def test_malformed_line_raises(self, tmp_path):
        path = tmp_path / "bad.txt"
        path.write_text("0.0 1 2 3\n")
        with pytest.raises(FormatError):
            load_trajectory(path)
