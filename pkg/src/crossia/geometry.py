"""Camera geometry: intrinsics, poses, back-projection, trajectory files.

Conventions
-----------
Camera frame: +x right, +y down, +z forward (pinhole looking along +z).
World frame: z-up, metric units.
Poses are world-from-camera: ``p_world = R(q) @ p_cam + position``.
Quaternions are stored ``(qx, qy, qz, qw)``, matching the on-disk trajectory
line format ``timestamp tx ty tz qx qy qz qw``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.spatial.transform import Rotation

from .errors import FormatError, InvalidArgument


@dataclass(frozen=True)
class CameraIntrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if self.fx <= 0 or self.fy <= 0:
            raise InvalidArgument("focal lengths must be positive")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise InvalidArgument("principal point must lie inside the image")


@dataclass(frozen=True)
class CameraPose:
    """World-from-camera transform as position + unit quaternion."""

    position: np.ndarray  # (3,) meters
    quaternion: np.ndarray  # (4,) as (qx, qy, qz, qw), unit norm

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=np.float64))
        object.__setattr__(self, "quaternion", np.asarray(self.quaternion, dtype=np.float64))
        if self.position.shape != (3,) or self.quaternion.shape != (4,):
            raise InvalidArgument("pose needs a 3-vector position and 4-vector quaternion")
        if abs(np.linalg.norm(self.quaternion) - 1.0) > 1e-9:
            raise InvalidArgument("quaternion is not unit norm")

    @property
    def rotation(self) -> np.ndarray:
        """3x3 rotation matrix mapping camera coordinates to world."""
        return Rotation.from_quat(self.quaternion).as_matrix()

    @staticmethod
    def identity() -> "CameraPose":
        return CameraPose(np.zeros(3), np.array([0.0, 0.0, 0.0, 1.0]))

    @staticmethod
    def from_matrix(rotation: np.ndarray, position: np.ndarray) -> "CameraPose":
        q = Rotation.from_matrix(rotation).as_quat()
        return CameraPose(np.asarray(position, dtype=np.float64), q / np.linalg.norm(q))


def look_at_pose(eye, target, up=(0.0, 0.0, 1.0)) -> CameraPose:
    """Pose at `eye` whose camera +z axis points toward `target`.

    `up` is the world direction the image's "up" should roughly align with;
    since the camera frame has +y pointing down, the y axis ends up opposed
    to `up` projected on the image plane.
    """
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise InvalidArgument("look_at target coincides with eye")
    forward = forward / norm
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # Degenerate: looking along `up`; pick an arbitrary horizontal right.
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
    right = right / np.linalg.norm(right)
    down = np.cross(forward, right)
    rotation = np.stack([right, down, forward], axis=1)
    return CameraPose.from_matrix(rotation, eye)


def pixel_ray_directions(intrinsics: CameraIntrinsics) -> np.ndarray:
    """Per-pixel camera-frame ray directions with z == 1.

    Returns an (H, W, 3) array; with this scaling the ray parameter t equals
    the z-depth, so rendered hit parameters can be stored directly as depth.
    """
    us = np.arange(intrinsics.width, dtype=np.float64)
    vs = np.arange(intrinsics.height, dtype=np.float64)
    uu, vv = np.meshgrid(us, vs)
    dirs = np.empty((intrinsics.height, intrinsics.width, 3), dtype=np.float64)
    dirs[..., 0] = (uu - intrinsics.cx) / intrinsics.fx
    dirs[..., 1] = (vv - intrinsics.cy) / intrinsics.fy
    dirs[..., 2] = 1.0
    return dirs


def backproject(depth: np.ndarray, pose: CameraPose, intrinsics: CameraIntrinsics) -> np.ndarray:
    """Lift a depth image to world-frame points.

    Pixels with depth <= 0 produce points at the camera origin; callers are
    expected to mask those out.
    """
    dirs = pixel_ray_directions(intrinsics)
    pts_cam = dirs * depth[..., None]
    return pts_cam @ pose.rotation.T + pose.position


@dataclass
class Trajectory:
    """Timestamped camera poses."""

    timestamps: list = field(default_factory=list)
    poses: list = field(default_factory=list)

    def __len__(self):
        return len(self.poses)

    def __iter__(self):
        return iter(self.poses)


def save_trajectory(trajectory: Trajectory, path) -> None:
    """Write whitespace-separated `timestamp tx ty tz qx qy qz qw` lines."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("# timestamp tx ty tz qx qy qz qw\n")
        for ts, pose in zip(trajectory.timestamps, trajectory.poses):
            tx, ty, tz = pose.position
            qx, qy, qz, qw = pose.quaternion
            fh.write(f"{ts:.6f} {tx:.9f} {ty:.9f} {tz:.9f} {qx:.9f} {qy:.9f} {qz:.9f} {qw:.9f}\n")


def load_trajectory(path) -> Trajectory:
    traj = Trajectory()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            parts = line.split()
            if len(parts) != 8:
                raise FormatError(f"{path}:{lineno}: expected 8 fields, got {len(parts)}")
            ts, tx, ty, tz, qx, qy, qz, qw = (float(p) for p in parts)
            q = np.array([qx, qy, qz, qw])
            q = q / np.linalg.norm(q)
            traj.timestamps.append(ts)
            traj.poses.append(CameraPose(np.array([tx, ty, tz]), q))
    return traj
