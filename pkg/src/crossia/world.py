"""Synthetic scenes, an analytic RGBD renderer, and the image degrader.

The renderer intersects rays with primitives exactly (slab test for boxes,
quadratic for spheres), so its depth and ground-truth instance masks serve as
an independent reference for the voxel-grid ray tracer in `mapping`.

Everything here is a pure function of its inputs and seeds.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass, field

import cv2
import numpy as np
import yaml

from .errors import FormatError, InvalidArgument
from .geometry import (
    CameraIntrinsics,
    CameraPose,
    Trajectory,
    look_at_pose,
    pixel_ray_directions,
)
from .mapping import SegmentMask

# Fixed directional light (surface-to-light, unnormalized on purpose is fine).
_LIGHT_DIR = np.array([-0.35, -0.25, 0.9])
_LIGHT_DIR = _LIGHT_DIR / np.linalg.norm(_LIGHT_DIR)
_AMBIENT = 0.3
_DIFFUSE = 0.7

_WALL_ALBEDO = np.array([0.82, 0.80, 0.76])
_FLOOR_ALBEDO = np.array([0.45, 0.42, 0.38])
_TABLE_ALBEDO = np.array([0.55, 0.42, 0.30])


@dataclass(frozen=True)
class SceneObject:
    instance_id: int
    shape: str  # "box" | "sphere"
    center: np.ndarray  # (3,) meters
    size: float  # box edge length / sphere diameter, meters
    albedo: np.ndarray  # (3,) rgb in [0, 1]

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=np.float64))
        object.__setattr__(self, "albedo", np.asarray(self.albedo, dtype=np.float64))
        if self.instance_id <= 0:
            raise InvalidArgument("instance ids must be positive (0 is background)")
        if self.shape not in ("box", "sphere"):
            raise InvalidArgument(f"unknown shape {self.shape!r}")
        if self.size <= 0:
            raise InvalidArgument("object size must be positive")

    @property
    def bounding_radius(self) -> float:
        if self.shape == "sphere":
            return self.size / 2.0
        return self.size * np.sqrt(3.0) / 2.0


@dataclass(frozen=True)
class Aabb:
    lo: np.ndarray
    hi: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "lo", np.asarray(self.lo, dtype=np.float64))
        object.__setattr__(self, "hi", np.asarray(self.hi, dtype=np.float64))
        if np.any(self.hi <= self.lo):
            raise InvalidArgument("degenerate axis-aligned box")

    def contains(self, point, margin: float = 0.0) -> bool:
        p = np.asarray(point)
        return bool(np.all(p >= self.lo + margin) and np.all(p <= self.hi - margin))


@dataclass(frozen=True)
class SceneDescription:
    seed: int
    objects: tuple  # tuple[SceneObject, ...]
    room_bounds: Aabb
    surfaces: tuple  # tuple[Aabb, ...]; surfaces[0] is the floor slab

    def __post_init__(self):
        ids = [o.instance_id for o in self.objects]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("duplicate instance ids in scene")
        for obj in self.objects:
            if not self.room_bounds.contains(obj.center):
                raise InvalidArgument(f"object {obj.instance_id} outside room bounds")

    def object_by_id(self, instance_id: int) -> SceneObject:
        for obj in self.objects:
            if obj.instance_id == instance_id:
                return obj
        raise InvalidArgument(f"no object with id {instance_id}")

    @property
    def floor_height(self) -> float:
        return float(self.surfaces[0].hi[2])

    @property
    def table_bounds(self) -> Aabb:
        return self.surfaces[1]


@dataclass(frozen=True)
class RgbdFrame:
    rgb: np.ndarray  # (H, W, 3) uint8
    depth: np.ndarray  # (H, W) float32 meters, 0 = invalid
    pose: CameraPose
    intrinsics: CameraIntrinsics
    timestamp: float

    def __post_init__(self):
        h, w = self.depth.shape
        if self.rgb.shape != (h, w, 3):
            raise InvalidArgument("rgb/depth dimensions disagree")
        if (h, w) != (self.intrinsics.height, self.intrinsics.width):
            raise InvalidArgument("frame dimensions disagree with intrinsics")
        if not np.all(np.isfinite(self.depth)) or np.any(self.depth < 0):
            raise InvalidArgument("depth must be finite and non-negative")


@dataclass(frozen=True)
class DegradationSpec:
    blur_sigma: float = 0.0
    blur_kernel: int = 9
    downsample_factor: int = 1
    noise_sigma: float = 0.0
    seed: int = 0

    def __post_init__(self):
        if self.blur_sigma < 0 or self.noise_sigma < 0:
            raise InvalidArgument("sigmas must be non-negative")
        if self.blur_kernel % 2 != 1:
            raise InvalidArgument("blur kernel must be odd")
        if self.downsample_factor < 1:
            raise InvalidArgument("downsample factor must be >= 1")

    def with_seed(self, seed: int) -> "DegradationSpec":
        return DegradationSpec(self.blur_sigma, self.blur_kernel,
                               self.downsample_factor, self.noise_sigma, seed)

    @property
    def is_identity(self) -> bool:
        return self.blur_sigma == 0 and self.downsample_factor == 1 and self.noise_sigma == 0


# ---------------------------------------------------------------------------
# Scene generation
# ---------------------------------------------------------------------------

_ROOM = Aabb(np.array([-3.0, -3.0, -0.2]), np.array([3.0, 3.0, 2.5]))
_FLOOR = Aabb(np.array([-3.0, -3.0, -0.1]), np.array([3.0, 3.0, 0.0]))
_TABLE = Aabb(np.array([-0.8, -0.5, 0.0]), np.array([0.8, 0.5, 0.7]))


def generate_scene(seed: int, n_instances: int) -> SceneDescription:
    """Deterministically place `n_instances` shapes on the table and floor.

    All instances draw their albedo from one narrow hue family per scene
    (like a shelf of same-brand household objects), so telling them apart
    hinges on small hue/lightness offsets plus shape and size — the
    fine-grained instance re-identification setting, rather than a palette a
    color histogram solves outright.
    """
    if n_instances < 1:
        raise InvalidArgument("n_instances must be >= 1")
    rng = np.random.default_rng(seed)
    placed: list[SceneObject] = []
    table_top = _TABLE.hi[2]
    base_hue = rng.uniform(0.0, 1.0)
    hue_spread = 0.3  # fraction of the wheel shared by the whole scene

    for idx in range(1, n_instances + 1):
        shape = "box" if rng.random() < 0.5 else "sphere"
        size = float(rng.uniform(0.15, 0.25))
        hue = (base_hue + hue_spread * (idx - 1) / n_instances
               + rng.uniform(-0.01, 0.01)) % 1.0
        sat = float(rng.uniform(0.45, 0.75))
        val = float(rng.uniform(0.55, 0.9))
        albedo = np.array(colorsys.hsv_to_rgb(hue, sat, val))

        center = None
        prefer_table = idx % 2 == 1
        for attempt in range(400):
            on_table = prefer_table if attempt < 200 else not prefer_table
            if on_table:
                margin = size / 2.0 + 0.02
                x = rng.uniform(_TABLE.lo[0] + margin, _TABLE.hi[0] - margin)
                y = rng.uniform(_TABLE.lo[1] + margin, _TABLE.hi[1] - margin)
                z = table_top + size / 2.0
            else:
                r = rng.uniform(1.15, 1.7)
                theta = rng.uniform(0.0, 2.0 * np.pi)
                x, y = r * np.cos(theta), r * np.sin(theta)
                z = size / 2.0
            candidate = np.array([x, y, z])
            cand_radius = size / 2.0 * (np.sqrt(3.0) if shape == "box" else 1.0)
            ok = all(
                np.linalg.norm(candidate - other.center) > cand_radius + other.bounding_radius + 0.02
                for other in placed
            )
            if ok:
                center = candidate
                break
        if center is None:
            raise InvalidArgument(
                f"could not place {n_instances} non-intersecting objects (stuck at {idx})"
            )
        placed.append(SceneObject(idx, shape, center, size, albedo))

    return SceneDescription(seed=seed, objects=tuple(placed),
                            room_bounds=_ROOM, surfaces=(_FLOOR, _TABLE))


# ---------------------------------------------------------------------------
# Trajectories
# ---------------------------------------------------------------------------

def orbit_trajectory(n_frames: int, seed: int, radius: float = 2.2,
                     height: float = 1.3, target=(0.0, 0.0, 0.55),
                     jitter: float = 0.15, fps: float = 5.0) -> Trajectory:
    """Circular scan around the table with per-frame jitter.

    Mimics a short environment sweep: the camera circles the scene center at
    roughly constant radius/height, always facing the target point.
    """
    if n_frames < 1:
        raise InvalidArgument("n_frames must be >= 1")
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    traj = Trajectory()
    for i in range(n_frames):
        theta = 2.0 * np.pi * i / n_frames + rng.uniform(-jitter, jitter) * 0.3
        r = radius + rng.uniform(-jitter, jitter)
        h = height + rng.uniform(-jitter, jitter) * 0.5
        eye = np.array([r * np.cos(theta), r * np.sin(theta), h])
        traj.timestamps.append(i / fps)
        traj.poses.append(look_at_pose(eye, target))
    return traj


def survey_trajectory(n_frames: int, seed: int, radius: float = 2.2,
                      heights=(1.0, 1.7), target=(0.0, 0.0, 0.55),
                      jitter: float = 0.15, fps: float = 5.0) -> Trajectory:
    """Orbit sweep alternating between several camera heights.

    A single ring sees object surfaces only in a narrow elevation band;
    alternating heights frame by frame closes most of the grazing-angle
    holes in the integrated voxel shells without any viewpoint jump
    mid-sequence (which would break frame-to-frame label association).
    """
    if n_frames < 1:
        raise InvalidArgument("n_frames must be >= 1")
    heights = tuple(heights)
    rng = np.random.default_rng(seed)
    target = np.asarray(target, dtype=np.float64)
    sweeps = int(np.ceil(n_frames / len(heights)))
    traj = Trajectory()
    for i in range(n_frames):
        theta = (2.0 * np.pi * (i // len(heights)) / sweeps
                 + rng.uniform(-jitter, jitter) * 0.3)
        r = radius + rng.uniform(-jitter, jitter)
        h = heights[i % len(heights)] + rng.uniform(-jitter, jitter) * 0.5
        eye = np.array([r * np.cos(theta), r * np.sin(theta), h])
        traj.timestamps.append(i / fps)
        traj.poses.append(look_at_pose(eye, target))
    return traj


def closeup_poses(scene: SceneDescription, instance_id: int, n_views: int,
                  seed: int, distance: float = 0.55) -> list:
    """Camera poses circling a single object at close range, facing it.

    Stands in for a person photographing the object from several angles.
    """
    obj = scene.object_by_id(instance_id)
    rng = np.random.default_rng(seed)
    poses = []
    for i in range(n_views):
        azim = 2.0 * np.pi * i / n_views + rng.uniform(-0.2, 0.2)
        elev = rng.uniform(0.35, 0.75)  # radians above horizontal
        offset = distance * np.array([
            np.cos(elev) * np.cos(azim),
            np.cos(elev) * np.sin(azim),
            np.sin(elev),
        ])
        eye = obj.center + offset
        # Keep the viewpoint inside the room.
        eye = np.clip(eye, scene.room_bounds.lo + 0.05, scene.room_bounds.hi - 0.05)
        poses.append(look_at_pose(eye, obj.center))
    return poses


# ---------------------------------------------------------------------------
# Analytic renderer
# ---------------------------------------------------------------------------

def _intersect_aabb(origin: np.ndarray, dirs: np.ndarray, box: Aabb, interior: bool):
    """Ray/AABB slab test, vectorized over rays sharing one origin.

    Returns (t, normal, hit) with `t` the ray parameter of the entry face
    (or the exit face when `interior`, i.e. the camera sits inside the box).
    """
    n = dirs.shape[0]
    tmins = np.empty((3, n))
    tmaxs = np.empty((3, n))
    for axis in range(3):
        d = dirs[:, axis]
        o = origin[axis]
        parallel = np.abs(d) < 1e-12
        safe_d = np.where(parallel, 1.0, d)
        t1 = (box.lo[axis] - o) / safe_d
        t2 = (box.hi[axis] - o) / safe_d
        lo_t = np.minimum(t1, t2)
        hi_t = np.maximum(t1, t2)
        inside_slab = box.lo[axis] <= o <= box.hi[axis]
        tmins[axis] = np.where(parallel, -np.inf if inside_slab else np.inf, lo_t)
        tmaxs[axis] = np.where(parallel, np.inf if inside_slab else -np.inf, hi_t)
    near = tmins.max(axis=0)
    far = tmaxs.min(axis=0)
    if interior:
        hit = (near < 0) & (far > 1e-9)
        t = far
        face_axis = tmaxs.argmin(axis=0)
    else:
        hit = (near <= far) & (near > 1e-9)
        t = near
        face_axis = tmins.argmax(axis=0)
    normal = np.zeros((n, 3))
    rows = np.arange(n)
    normal[rows, face_axis] = -np.sign(dirs[rows, face_axis])
    return t, normal, hit


def _intersect_sphere(origin: np.ndarray, dirs: np.ndarray, center: np.ndarray, radius: float):
    oc = origin - center
    a = np.einsum("ij,ij->i", dirs, dirs)
    b = 2.0 * dirs @ oc
    c = oc @ oc - radius * radius
    disc = b * b - 4.0 * a * c
    hit = disc >= 0
    sqrt_disc = np.sqrt(np.where(hit, disc, 0.0))
    t = (-b - sqrt_disc) / (2.0 * a)
    hit = hit & (t > 1e-9)
    points = origin + dirs * t[:, None]
    normal = (points - center) / radius
    return t, normal, hit


def render_frame(scene: SceneDescription, pose: CameraPose,
                 intrinsics: CameraIntrinsics, timestamp: float = 0.0):
    """Render one RGBD frame plus its ground-truth instance mask."""
    h, w = intrinsics.height, intrinsics.width
    dirs_cam = pixel_ray_directions(intrinsics).reshape(-1, 3)
    dirs = dirs_cam @ pose.rotation.T  # keeps z-depth parameterization
    origin = pose.position

    best_t = np.full(h * w, np.inf)
    best_id = np.zeros(h * w, dtype=np.int32)
    best_normal = np.zeros((h * w, 3))
    best_albedo = np.zeros((h * w, 3))

    def consider(t, normal, hit, instance_id, albedo):
        closer = hit & (t < best_t)
        best_t[closer] = t[closer]
        best_id[closer] = instance_id
        best_normal[closer] = normal[closer]
        best_albedo[closer] = albedo

    t, nrm, hit = _intersect_aabb(origin, dirs, scene.room_bounds, interior=True)
    consider(t, nrm, hit, 0, _WALL_ALBEDO)
    for k, surface in enumerate(scene.surfaces):
        t, nrm, hit = _intersect_aabb(origin, dirs, surface, interior=False)
        consider(t, nrm, hit, 0, _FLOOR_ALBEDO if k == 0 else _TABLE_ALBEDO)
    for obj in scene.objects:
        if obj.shape == "sphere":
            t, nrm, hit = _intersect_sphere(origin, dirs, obj.center, obj.size / 2.0)
        else:
            half = obj.size / 2.0
            box = Aabb(obj.center - half, obj.center + half)
            t, nrm, hit = _intersect_aabb(origin, dirs, box, interior=False)
        consider(t, nrm, hit, obj.instance_id, obj.albedo)

    shade = _AMBIENT + _DIFFUSE * np.clip(best_normal @ _LIGHT_DIR, 0.0, None)
    rgb = np.clip(best_albedo * shade[:, None] * 255.0, 0, 255).astype(np.uint8)
    depth = np.where(np.isfinite(best_t), best_t, 0.0).astype(np.float32)

    frame = RgbdFrame(rgb.reshape(h, w, 3), depth.reshape(h, w), pose, intrinsics, timestamp)
    mask = SegmentMask(best_id.reshape(h, w))
    return frame, mask


def render_sequence(scene: SceneDescription, trajectory, intrinsics: CameraIntrinsics) -> list:
    """Render (RgbdFrame, SegmentMask) for every pose of the trajectory."""
    poses = list(trajectory.poses) if isinstance(trajectory, Trajectory) else list(trajectory)
    if not poses:
        raise InvalidArgument("trajectory is empty")
    timestamps = (trajectory.timestamps if isinstance(trajectory, Trajectory)
                  else [float(i) for i in range(len(poses))])
    return [render_frame(scene, pose, intrinsics, ts)
            for ts, pose in zip(timestamps, poses)]


# ---------------------------------------------------------------------------
# Degradation
# ---------------------------------------------------------------------------

def degrade(image: np.ndarray, spec: DegradationSpec) -> np.ndarray:
    """Blur, resolution loss (down/up resample), then sensor noise.

    The identity spec returns an unmodified copy; output dimensions always
    equal the input's.
    """
    if image.size == 0:
        raise InvalidArgument("empty image")
    out = image.copy()
    if spec.blur_sigma > 0:
        k = spec.blur_kernel
        out = cv2.GaussianBlur(out, (k, k), sigmaX=spec.blur_sigma)
    if spec.downsample_factor > 1:
        h, w = out.shape[:2]
        f = spec.downsample_factor
        small = cv2.resize(out, (max(1, w // f), max(1, h // f)), interpolation=cv2.INTER_AREA)
        out = cv2.resize(small, (w, h), interpolation=cv2.INTER_LINEAR)
    if spec.noise_sigma > 0:
        rng = np.random.default_rng(spec.seed)
        noise = rng.normal(0.0, spec.noise_sigma, size=out.shape)
        out = np.clip(out.astype(np.float64) + noise, 0, 255).astype(np.uint8)
    return out


def psnr(reference: np.ndarray, image: np.ndarray) -> float:
    """Peak signal-to-noise ratio in dB; inf for identical images."""
    diff = reference.astype(np.float64) - image.astype(np.float64)
    mse = float(np.mean(diff * diff))
    if mse == 0:
        return float("inf")
    return 10.0 * np.log10(255.0 ** 2 / mse)


# ---------------------------------------------------------------------------
# Scene files
# ---------------------------------------------------------------------------

_SCENE_FORMAT_VERSION = 1


def save_scene(scene: SceneDescription, path) -> None:
    doc = {
        "format_version": _SCENE_FORMAT_VERSION,
        "seed": scene.seed,
        "room_bounds": {"lo": scene.room_bounds.lo.tolist(), "hi": scene.room_bounds.hi.tolist()},
        "surfaces": [{"lo": s.lo.tolist(), "hi": s.hi.tolist()} for s in scene.surfaces],
        "objects": [
            {
                "instance_id": o.instance_id,
                "shape": o.shape,
                "center": o.center.tolist(),
                "size": o.size,
                "albedo": o.albedo.tolist(),
            }
            for o in scene.objects
        ],
    }
    with open(path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(doc, fh, sort_keys=False)


def load_scene(path) -> SceneDescription:
    with open(path, "r", encoding="utf-8") as fh:
        doc = yaml.safe_load(fh)
    if not isinstance(doc, dict) or doc.get("format_version") != _SCENE_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported scene file version")
    objects = tuple(
        SceneObject(o["instance_id"], o["shape"], np.array(o["center"]),
                    float(o["size"]), np.array(o["albedo"]))
        for o in doc["objects"]
    )
    room = Aabb(np.array(doc["room_bounds"]["lo"]), np.array(doc["room_bounds"]["hi"]))
    surfaces = tuple(Aabb(np.array(s["lo"]), np.array(s["hi"])) for s in doc["surfaces"])
    return SceneDescription(seed=int(doc["seed"]), objects=objects,
                            room_bounds=room, surfaces=surfaces)
