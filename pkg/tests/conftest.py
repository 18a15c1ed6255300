"""Shared fixtures: one small rendered world, its voxel map, and an
object-image database collected from it.

Session-scoped because rendering and mapping dominate suite runtime; tests
that mutate the database reload their own copy from disk instead of touching
the shared instance.
"""

import numpy as np
import pytest

from crossia import (
    CameraIntrinsics,
    CollectionConfig,
    DeblurrerHandle,
    SegmenterHandle,
    SegmentMask,
    VoxelSemanticMap,
    add_user_images,
    associate_labels,
    collect_database,
    generate_scene,
    integrate_frame,
    match_instance,
    raytrace_mask,
    render_sequence,
    save_database,
    segment,
    survey_trajectory,
)
from crossia.cli import _closeup_crops


N_INSTANCES = 5
N_FRAMES = 24
WORLD_SEED = 11


@pytest.fixture(scope="session")
def scene():
    return generate_scene(WORLD_SEED, N_INSTANCES)


@pytest.fixture(scope="session")
def intrinsics():
    return CameraIntrinsics(width=96, height=72, fx=70.0, fy=70.0,
                            cx=47.5, cy=35.5)


@pytest.fixture(scope="session")
def trajectory():
    return survey_trajectory(N_FRAMES, WORLD_SEED)


@pytest.fixture(scope="session")
def rendered(scene, trajectory, intrinsics):
    """List of (RgbdFrame, ground-truth SegmentMask)."""
    return render_sequence(scene, trajectory, intrinsics)


@pytest.fixture(scope="session")
def vmap(rendered, trajectory):
    """Voxel map built through the full association path."""
    segmenter = SegmenterHandle("oracle")
    built = VoxelSemanticMap(voxel_size=0.03)
    for (frame, gt), pose in zip(rendered, trajectory.poses):
        fresh = segment(segmenter, frame.rgb, gt_mask=gt)
        if built.is_empty:
            traced = SegmentMask(np.zeros_like(fresh.ids))
        else:
            traced = raytrace_mask(built, pose, frame.intrinsics)
        merged = associate_labels(built, fresh, traced)
        integrate_frame(built, frame, merged)
    return built


@pytest.fixture(scope="session")
def gt_to_map(scene, vmap):
    """Renderer instance id -> map-global label, by centroid proximity."""
    return {obj.instance_id: match_instance(vmap, obj.center)
            for obj in scene.objects}


@pytest.fixture(scope="session")
def db(tmp_path_factory, scene, rendered, vmap, gt_to_map, intrinsics):
    """Collected database with 2 user shots per instance."""
    root = tmp_path_factory.mktemp("db")
    frames = [frame for frame, _ in rendered]
    # 6 px keeps the farthest object (which peaks ~7 px wide at survey
    # distance) while still dropping single-frame association fragments.
    built = collect_database(
        frames, vmap, SegmenterHandle("oracle"), DeblurrerHandle("identity"),
        CollectionConfig(output_dir=root, min_bbox_size=6))
    for obj in scene.objects:
        gid = gt_to_map[obj.instance_id]
        if gid not in built.instances:
            continue
        shots = _closeup_crops(scene, obj.instance_id, 2,
                               500 + obj.instance_id, intrinsics)
        add_user_images(built, gid, shots, 2)
    save_database(built, root)
    return built


@pytest.fixture()
def db_copy(db, tmp_path):
    """Fresh on-disk copy for tests that mutate or tamper."""
    save_database(db, tmp_path / "db")
    from crossia import load_database

    return load_database(tmp_path / "db")
