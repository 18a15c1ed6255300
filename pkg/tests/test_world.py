"""Synthetic world: scene generation, analytic rendering, degradation."""

import numpy as np
import pytest

from crossia import (
    CameraIntrinsics,
    DegradationSpec,
    InvalidArgument,
    SceneDescription,
    SceneObject,
    closeup_poses,
    degrade,
    generate_scene,
    load_scene,
    look_at_pose,
    orbit_trajectory,
    psnr,
    render_frame,
    render_sequence,
    save_scene,
    survey_trajectory,
)


class TestGenerateScene:
    def test_id_count_contract(self):
        scene = generate_scene(7, 12)
        assert [o.instance_id for o in scene.objects] == list(range(1, 13))

    def test_determinism(self):
        a = generate_scene(7, 12)
        b = generate_scene(7, 12)
        for oa, ob in zip(a.objects, b.objects):
            assert oa.shape == ob.shape
            np.testing.assert_array_equal(oa.center, ob.center)
            np.testing.assert_array_equal(oa.albedo, ob.albedo)
            assert oa.size == ob.size

    def test_seed_changes_centers(self):
        a = generate_scene(7, 12)
        b = generate_scene(8, 12)
        assert any(np.any(oa.center != ob.center)
                   for oa, ob in zip(a.objects, b.objects))

    def test_rejects_nonpositive_count(self):
        with pytest.raises(InvalidArgument):
            generate_scene(0, 0)

    def test_objects_inside_room_and_disjoint(self):
        rng = np.random.default_rng(0)
        for seed in rng.integers(0, 10_000, size=10):
            scene = generate_scene(int(seed), 8)
            for obj in scene.objects:
                assert np.all(obj.center >= scene.room_bounds.lo)
                assert np.all(obj.center <= scene.room_bounds.hi)
            for i, a in enumerate(scene.objects):
                for b in scene.objects[i + 1:]:
                    gap = np.linalg.norm(a.center - b.center)
                    assert gap > a.bounding_radius + b.bounding_radius

    def test_roundtrip(self, tmp_path):
        scene = generate_scene(3, 6)
        save_scene(scene, tmp_path / "scene.yaml")
        loaded = load_scene(tmp_path / "scene.yaml")
        assert loaded.seed == scene.seed
        for oa, ob in zip(scene.objects, loaded.objects):
            assert oa.instance_id == ob.instance_id
            assert oa.shape == ob.shape
            np.testing.assert_allclose(oa.center, ob.center)
            np.testing.assert_allclose(oa.albedo, ob.albedo)


def _single_box_scene(size=0.2, center=(0.0, 0.0, 1.0)):
    room = generate_scene(0, 1)
    obj = SceneObject(1, "box", np.array(center, dtype=np.float64), size,
                      np.array([0.8, 0.2, 0.2]))
    return SceneDescription(seed=0, objects=(obj,),
                            room_bounds=room.room_bounds,
                            surfaces=room.surfaces)


class TestRenderFrame:
    def test_box_projection_width(self):
        """A 0.2 m box 1 m ahead at fx=100 spans about 20 px."""
        scene = _single_box_scene()
        intr = CameraIntrinsics(width=64, height=64, fx=100.0, fy=100.0,
                                cx=31.5, cy=31.5)
        pose = look_at_pose(np.array([0.0, 0.0, 0.0]),
                            np.array([0.0, 0.0, 1.0]))
        _, mask = render_frame(scene, pose, intr)
        cols = np.where((mask.ids == 1).any(axis=0))[0]
        rows = np.where((mask.ids == 1).any(axis=1))[0]
        assert abs((cols[-1] - cols[0] + 1) - 20) <= 2
        assert abs((rows[-1] - rows[0] + 1) - 20) <= 2
        # region centered near the principal point
        assert abs(cols.mean() - 31.5) < 2 and abs(rows.mean() - 31.5) < 2

    def test_empty_scene_mask_is_zero(self):
        room = generate_scene(0, 1)
        empty = SceneDescription(seed=0, objects=(),
                                 room_bounds=room.room_bounds,
                                 surfaces=room.surfaces)
        intr = CameraIntrinsics(width=48, height=36, fx=40.0, fy=40.0,
                                cx=23.5, cy=17.5)
        pose = look_at_pose(np.array([0.0, -2.0, 1.0]),
                            np.array([0.0, 0.0, 0.5]))
        _, mask = render_frame(empty, pose, intr)
        assert np.all(mask.ids == 0)

    def test_wall_depth_at_principal_point(self):
        """Looking straight at a wall 2 m away reads exactly 2.0 m."""
        room = generate_scene(0, 1)
        scene = SceneDescription(seed=0, objects=(),
                                 room_bounds=room.room_bounds,
                                 surfaces=room.surfaces)
        wall_x = scene.room_bounds.hi[0]
        eye = np.array([wall_x - 2.0, 0.0, 1.0])
        pose = look_at_pose(eye, np.array([wall_x, 0.0, 1.0]))
        intr = CameraIntrinsics(width=33, height=33, fx=50.0, fy=50.0,
                                cx=16.0, cy=16.0)
        frame, _ = render_frame(scene, pose, intr)
        assert frame.depth[16, 16] == pytest.approx(2.0, abs=1e-6)

    def test_sequence_requires_poses(self, scene, intrinsics):
        from crossia.geometry import Trajectory

        with pytest.raises(InvalidArgument):
            render_sequence(scene, Trajectory(timestamps=(), poses=()),
                            intrinsics)


class TestDegrade:
    def _image(self, seed=0):
        rng = np.random.default_rng(seed)
        return rng.integers(0, 256, size=(48, 64, 3), dtype=np.uint8)

    def test_identity_spec_is_bitwise_identity(self):
        img = self._image()
        spec = DegradationSpec(blur_sigma=0.0, blur_kernel=1,
                               downsample_factor=1, noise_sigma=0.0, seed=0)
        np.testing.assert_array_equal(degrade(img, spec), img)

    def test_degradation_lowers_psnr(self):
        img = self._image()
        spec = DegradationSpec(blur_sigma=2.0, blur_kernel=9,
                               downsample_factor=4, noise_sigma=5.0, seed=0)
        out = degrade(img, spec)
        assert psnr(img, out) < np.inf
        assert not np.array_equal(out, img)

    def test_deterministic_per_seed(self):
        img = self._image()
        spec = DegradationSpec(blur_sigma=1.0, blur_kernel=5,
                               downsample_factor=2, noise_sigma=8.0, seed=42)
        np.testing.assert_array_equal(degrade(img, spec), degrade(img, spec))
        other = DegradationSpec(blur_sigma=1.0, blur_kernel=5,
                                downsample_factor=2, noise_sigma=8.0, seed=43)
        assert not np.array_equal(degrade(img, spec), degrade(img, other))

    def test_shape_and_dtype_preserved(self):
        img = self._image()
        spec = DegradationSpec(blur_sigma=2.0, blur_kernel=9,
                               downsample_factor=4, noise_sigma=5.0, seed=1)
        out = degrade(img, spec)
        assert out.shape == img.shape and out.dtype == np.uint8


class TestTrajectories:
    def test_survey_interleaves_heights(self):
        traj = survey_trajectory(10, 0, heights=(1.0, 1.7))
        zs = [p.position[2] for p in traj.poses]
        lows, highs = zs[0::2], zs[1::2]
        assert max(lows) < min(highs)

    def test_survey_deterministic(self):
        a = survey_trajectory(8, 5)
        b = survey_trajectory(8, 5)
        for pa, pb in zip(a.poses, b.poses):
            np.testing.assert_array_equal(pa.position, pb.position)
            np.testing.assert_array_equal(pa.quaternion, pb.quaternion)

    def test_orbit_radius(self):
        traj = orbit_trajectory(12, seed=4, radius=2.0, height=1.2,
                                jitter=0.0)
        for pose in traj.poses:
            assert np.hypot(*pose.position[:2]) == pytest.approx(2.0)

    def test_closeup_poses_face_the_object(self, scene):
        obj = scene.objects[0]
        for pose in closeup_poses(scene, obj.instance_id, 4, seed=3):
            # camera +z axis (third rotation column) points toward the object
            forward = pose.rotation[:, 2]
            to_obj = obj.center - pose.position
            to_obj /= np.linalg.norm(to_obj)
            assert forward @ to_obj > 0.99
