"""Voxel semantic map: vote-based instance labeling, ray-traced masks,
bounding boxes, centroids, and navigation-goal queries.

A cell accumulates one vote per observed object pixel back-projected into it;
its effective id is the vote argmax (first-assigned id wins ties). Background
surface pixels mark cells occupied without voting, so walls and furniture
still terminate rays and block navigation goals.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import TYPE_CHECKING

import numpy as np
from scipy import ndimage

from .errors import FormatError, GoalUnreachable, InvalidArgument, NotFound
from .geometry import CameraIntrinsics, CameraPose, backproject, pixel_ray_directions

if TYPE_CHECKING:  # pragma: no cover
    from .world import RgbdFrame

_MAP_FORMAT_VERSION = 1


@dataclass(frozen=True)
class SegmentMask:
    """Per-pixel instance ids; 0 is background."""

    ids: np.ndarray  # (H, W) int32

    def __post_init__(self):
        arr = np.asarray(self.ids)
        if arr.ndim != 2:
            raise InvalidArgument("segment mask must be 2-D")
        if arr.dtype != np.int32:
            arr = arr.astype(np.int32)
        if arr.min(initial=0) < 0:
            raise InvalidArgument("segment ids must be non-negative")
        object.__setattr__(self, "ids", arr)

    @property
    def shape(self):
        return self.ids.shape


@dataclass(frozen=True)
class BBox:
    """Inclusive pixel bounds of one instance's mask region."""

    x_min: int
    y_min: int
    x_max: int
    y_max: int
    instance_id: int

    def __post_init__(self):
        if self.x_min > self.x_max or self.y_min > self.y_max:
            raise InvalidArgument("inverted bounding box")
        if self.instance_id <= 0:
            raise InvalidArgument("bounding boxes require a positive instance id")

    @property
    def width(self) -> int:
        return self.x_max - self.x_min + 1

    @property
    def height(self) -> int:
        return self.y_max - self.y_min + 1


@dataclass(frozen=True)
class NavGoal:
    target: np.ndarray  # (3,) meters; z is the floor height of the chosen cell
    instance_id: int
    distance_to_centroid: float  # horizontal meters


@dataclass
class VoxelCell:
    votes: dict = field(default_factory=dict)  # instance_id -> count, insertion-ordered
    occupied: bool = False

    @property
    def effective_id(self) -> int:
        best_id, best_count = 0, 0
        for instance_id, count in self.votes.items():
            if count > best_count:  # strict: earlier-inserted id keeps ties
                best_id, best_count = instance_id, count
        return best_id


class VoxelSemanticMap:
    def __init__(self, voxel_size: float = 0.05, origin=(0.0, 0.0, 0.0)):
        if voxel_size <= 0:
            raise InvalidArgument("voxel size must be positive")
        self.voxel_size = float(voxel_size)
        self.origin = np.asarray(origin, dtype=np.float64)
        self.cells: dict = {}  # (i, j, k) -> VoxelCell
        self.next_label = 1
        self._dense_cache = None

    # -- basic cell access ---------------------------------------------------

    def world_to_index(self, points: np.ndarray) -> np.ndarray:
        pts = np.atleast_2d(np.asarray(points, dtype=np.float64))
        return np.floor((pts - self.origin) / self.voxel_size).astype(np.int64)

    def index_center(self, index) -> np.ndarray:
        return self.origin + (np.asarray(index, dtype=np.float64) + 0.5) * self.voxel_size

    def add_vote(self, index, instance_id: int, count: int = 1) -> None:
        if instance_id <= 0:
            raise InvalidArgument("votes require a positive instance id")
        key = tuple(int(v) for v in index)
        cell = self.cells.get(key)
        if cell is None:
            cell = self.cells[key] = VoxelCell()
        cell.votes[instance_id] = cell.votes.get(instance_id, 0) + int(count)
        cell.occupied = True
        if instance_id >= self.next_label:
            self.next_label = instance_id + 1
        self._dense_cache = None

    def mark_occupied(self, index) -> None:
        key = tuple(int(v) for v in index)
        cell = self.cells.get(key)
        if cell is None:
            cell = self.cells[key] = VoxelCell()
        cell.occupied = True
        self._dense_cache = None

    def allocate_label(self) -> int:
        label = self.next_label
        self.next_label += 1
        return label

    def instance_ids(self) -> list:
        ids = {cell.effective_id for cell in self.cells.values()}
        ids.discard(0)
        return sorted(ids)

    @property
    def is_empty(self) -> bool:
        return not self.cells

    # -- dense view ----------------------------------------------------------

    def dense_grid(self):
        """(grid, lo_index, free_dist): int32 grid with -1 free, 0 occupied
        background, >0 instance id, plus the chessboard distance from each
        cell to the nearest occupied one (for empty-space skipping).
        Cached until the next mutation."""
        if self._dense_cache is not None:
            return self._dense_cache
        if not self.cells:
            raise InvalidArgument("dense grid of an empty map")
        keys = np.array(list(self.cells.keys()), dtype=np.int64)
        lo = keys.min(axis=0)
        shape = keys.max(axis=0) - lo + 1
        grid = np.full(tuple(shape), -1, dtype=np.int32)
        for key, cell in self.cells.items():
            if cell.occupied:
                grid[key[0] - lo[0], key[1] - lo[1], key[2] - lo[2]] = (
                    cell.effective_id if cell.votes else 0
                )
        free_dist = ndimage.distance_transform_cdt(
            grid < 0, metric="chessboard").astype(np.int64)
        self._dense_cache = (grid, lo, free_dist)
        return self._dense_cache


# ---------------------------------------------------------------------------
# Frame integration
# ---------------------------------------------------------------------------

def integrate_frame(vmap: VoxelSemanticMap, frame: "RgbdFrame", mask: SegmentMask,
                    depth_range=(0.3, 5.0)) -> VoxelSemanticMap:
    """Back-project one segmented frame into the map.

    Object pixels vote for their mask id; background pixels only mark their
    surface voxel occupied. Pixels with invalid or out-of-range depth are
    skipped.
    """
    if mask.ids.shape != frame.depth.shape:
        raise InvalidArgument("mask dimensions disagree with the frame")
    depth = frame.depth.astype(np.float64)
    valid = (depth > 0) & (depth >= depth_range[0]) & (depth <= depth_range[1])
    if not np.any(valid):
        return vmap
    points = backproject(depth, frame.pose, frame.intrinsics)[valid]
    ids = mask.ids[valid].astype(np.int64)
    voxels = vmap.world_to_index(points)

    labeled = ids > 0
    if np.any(labeled):
        rows = np.concatenate([voxels[labeled], ids[labeled, None]], axis=1)
        uniq, counts = np.unique(rows, axis=0, return_counts=True)
        for (i, j, k, instance_id), count in zip(uniq, counts):
            vmap.add_vote((i, j, k), int(instance_id), int(count))
    if np.any(~labeled):
        uniq = np.unique(voxels[~labeled], axis=0)
        for index in uniq:
            vmap.mark_occupied(index)
    return vmap


# ---------------------------------------------------------------------------
# Ray tracing
# ---------------------------------------------------------------------------

def trace_rays(vmap: VoxelSemanticMap, origin: np.ndarray, dirs: np.ndarray,
               max_range: float = 10.0) -> np.ndarray:
    """March rays through the voxel grid; return the first occupied cell's
    effective id per ray (0 when nothing is hit within `max_range`).

    Free space is skipped using the cached distance field: a ray in a cell
    whose nearest occupied cell is d cells away can safely advance d - 1
    cells' worth of distance before single-cell stepping resumes.
    """
    dirs = np.atleast_2d(np.asarray(dirs, dtype=np.float64))
    n = dirs.shape[0]
    result = np.zeros(n, dtype=np.int32)
    if vmap.is_empty:
        return result
    grid, lo, free_dist = vmap.dense_grid()
    if grid.max() < 0:
        return result
    shape = np.array(grid.shape, dtype=np.int64)
    h = vmap.voxel_size
    grid_lo = vmap.origin + lo * h
    grid_hi = grid_lo + shape * h
    origin = np.asarray(origin, dtype=np.float64)

    norms = np.linalg.norm(dirs, axis=1)
    unit = dirs / np.where(norms > 0, norms, 1.0)[:, None]

    # Clip rays to the grid's bounding box.
    near = np.full(n, -np.inf)
    far = np.full(n, np.inf)
    for axis in range(3):
        d = unit[:, axis]
        o = origin[axis]
        parallel = np.abs(d) < 1e-12
        safe = np.where(parallel, 1.0, d)
        t1 = (grid_lo[axis] - o) / safe
        t2 = (grid_hi[axis] - o) / safe
        lo_t, hi_t = np.minimum(t1, t2), np.maximum(t1, t2)
        inside = grid_lo[axis] <= o <= grid_hi[axis]
        lo_t = np.where(parallel, -np.inf if inside else np.inf, lo_t)
        hi_t = np.where(parallel, np.inf if inside else -np.inf, hi_t)
        near = np.maximum(near, lo_t)
        far = np.minimum(far, hi_t)

    eps = h * 1e-6
    t = np.maximum(near, 0.0) + eps
    t_end = np.minimum(far, max_range)
    active = (norms > 0) & (near <= far) & (t < t_end)
    if not np.any(active):
        return result

    step_pos = unit > 0
    with np.errstate(divide="ignore", invalid="ignore"):
        inv = np.where(np.abs(unit) > 1e-12, 1.0 / unit, np.inf)

    voxel = np.zeros((n, 3), dtype=np.int64)
    idx0 = np.flatnonzero(active)
    pos = origin[None, :] + unit[idx0] * t[idx0, None]
    voxel[idx0] = np.clip(np.floor((pos - grid_lo) / h).astype(np.int64),
                          0, shape - 1)
    while True:
        idx = np.flatnonzero(active)
        if idx.size == 0:
            break
        v = voxel[idx]
        vals = grid[v[:, 0], v[:, 1], v[:, 2]]
        hit = vals >= 0
        result[idx[hit]] = vals[hit]
        active[idx[hit]] = False
        idx = idx[~hit]
        if idx.size == 0:
            break
        v = voxel[idx]
        dist = free_dist[v[:, 0], v[:, 1], v[:, 2]]

        t_next = np.empty(idx.size)
        skip = dist >= 2
        t_next[skip] = t[idx[skip]] + (dist[skip] - 1) * h
        if np.any(~skip):
            near_idx = idx[~skip]
            # exact single-cell step: ray parameter of the nearest exit face
            boundary = grid_lo + (voxel[near_idx] + step_pos[near_idx]) * h
            exits = np.where(np.abs(unit[near_idx]) > 1e-12,
                             (boundary - origin) * inv[near_idx], np.inf)
            t_next[~skip] = exits.min(axis=1) + eps
        t[idx] = t_next
        overrun = t_next > t_end[idx]
        active[idx[overrun]] = False
        idx = idx[~overrun]
        if idx.size == 0:
            continue
        pos = origin[None, :] + unit[idx] * t[idx, None]
        moved = np.floor((pos - grid_lo) / h).astype(np.int64)
        oob = (moved < 0).any(axis=1) | (moved >= shape).any(axis=1)
        voxel[idx] = np.clip(moved, 0, shape - 1)
        active[idx[oob]] = False
    return result


def raytrace_mask(vmap: VoxelSemanticMap, pose: CameraPose,
                  intrinsics: CameraIntrinsics, max_range: float = 10.0) -> SegmentMask:
    """Regenerate a frame-consistent instance mask by casting one ray per pixel."""
    dirs = pixel_ray_directions(intrinsics).reshape(-1, 3) @ pose.rotation.T
    ids = trace_rays(vmap, pose.position, dirs, max_range=max_range)
    return SegmentMask(ids.reshape(intrinsics.height, intrinsics.width))


# ---------------------------------------------------------------------------
# Label association
# ---------------------------------------------------------------------------

def associate_labels(vmap: VoxelSemanticMap, fresh_mask: SegmentMask,
                     traced_mask: SegmentMask, iou_threshold: float = 0.25) -> SegmentMask:
    """Relabel segmenter-local regions to map-global ids by best mask IoU.

    A fresh segment adopts the traced id with the highest IoU if it clears
    the threshold; otherwise it is given a newly allocated global id.
    """
    if fresh_mask.ids.shape != traced_mask.ids.shape:
        raise InvalidArgument("mask dimensions disagree")
    fresh = fresh_mask.ids
    traced = traced_mask.ids
    fresh_ids = np.unique(fresh[fresh > 0])
    out = np.zeros_like(fresh)
    if fresh_ids.size == 0:
        return SegmentMask(out)

    fresh_areas = {int(f): int(np.count_nonzero(fresh == f)) for f in fresh_ids}
    traced_ids = np.unique(traced[traced > 0])
    traced_areas = {int(t): int(np.count_nonzero(traced == t)) for t in traced_ids}

    both = (fresh > 0) & (traced > 0)
    inter: dict = {}
    if np.any(both):
        pairs = np.stack([fresh[both], traced[both]], axis=1)
        uniq, counts = np.unique(pairs, axis=0, return_counts=True)
        inter = {(int(f), int(t)): int(c) for (f, t), c in zip(uniq, counts)}

    for f in sorted(int(v) for v in fresh_ids):
        best_id, best_iou = 0, 0.0
        for t, area_t in traced_areas.items():
            overlap = inter.get((f, t), 0)
            if overlap == 0:
                continue
            iou = overlap / (fresh_areas[f] + area_t - overlap)
            if iou > best_iou:
                best_id, best_iou = t, iou
        if best_iou >= iou_threshold and best_id > 0:
            out[fresh == f] = best_id
        else:
            out[fresh == f] = vmap.allocate_label()
    return SegmentMask(out)


# ---------------------------------------------------------------------------
# Bounding boxes, centroids, navigation goals
# ---------------------------------------------------------------------------

def mask_to_bboxes(mask: SegmentMask, min_size: int = 10) -> list:
    """Tight per-id bounds (a single union box even for disconnected regions);
    boxes narrower than `min_size` in either dimension are dropped."""
    boxes = []
    for instance_id in np.unique(mask.ids[mask.ids > 0]):
        ys, xs = np.nonzero(mask.ids == instance_id)
        box = BBox(int(xs.min()), int(ys.min()), int(xs.max()), int(ys.max()),
                   int(instance_id))
        if box.width >= min_size and box.height >= min_size:
            boxes.append(box)
    return boxes


def instance_centroid(vmap: VoxelSemanticMap, instance_id: int) -> np.ndarray:
    """Mean of the centers of all voxels whose effective id matches."""
    if vmap.is_empty:
        raise NotFound(f"instance {instance_id} not in map")
    grid, lo, _ = vmap.dense_grid()
    indices = np.argwhere(grid == instance_id)
    if indices.size == 0:
        raise NotFound(f"instance {instance_id} not in map")
    centers = vmap.origin + (indices + lo + 0.5) * vmap.voxel_size
    return centers.mean(axis=0)


def match_instance(vmap: VoxelSemanticMap, point: np.ndarray,
                   max_distance: float = 0.3) -> int:
    """Map instance whose centroid lies nearest to a world point.

    Label ids are assigned during mapping and carry no external meaning, so
    anything that knows an object only by position (a user pointing at it, a
    renderer's ground truth) is tied back to the map this way. Raises
    :class:`NotFound` if no centroid is within `max_distance` meters.
    """
    point = np.asarray(point, dtype=np.float64)
    best_id, best = -1, float("inf")
    for instance_id in vmap.instance_ids():
        dist = float(np.linalg.norm(instance_centroid(vmap, instance_id) - point))
        if dist < best:
            best_id, best = instance_id, dist
    if best > max_distance:
        raise NotFound(f"no map instance within {max_distance} m of {point.tolist()}")
    return best_id


def blocked_columns(vmap: VoxelSemanticMap, floor_height: float = 0.0) -> set:
    """(i, j) columns containing any occupied voxel above the floor layer."""
    h = vmap.voxel_size
    blocked = set()
    for (i, j, k), cell in vmap.cells.items():
        if not cell.occupied:
            continue
        center_z = vmap.origin[2] + (k + 0.5) * h
        if center_z > floor_height + h / 2.0:
            blocked.add((i, j))
    return blocked


def resolve_nav_goal(vmap: VoxelSemanticMap, instance_id: int,
                     max_radius: float = 1.0, floor_height: float = 0.0) -> NavGoal:
    """Free floor cell near the instance centroid.

    The cell directly under the centroid wins when its column is unblocked;
    otherwise the nearest unblocked cell (center-to-centroid horizontal
    distance) within `max_radius`, ties broken by cell index. Unobserved
    floor cells count as free. Raises GoalUnreachable when every candidate
    column is blocked.
    """
    centroid = instance_centroid(vmap, instance_id)
    blocked = blocked_columns(vmap, floor_height=floor_height)
    h = vmap.voxel_size
    cx, cy = centroid[0], centroid[1]

    def cell_center(i, j):
        return vmap.origin[:2] + (np.array([i, j]) + 0.5) * h

    def goal(i, j, dist):
        center = cell_center(i, j)
        return NavGoal(target=np.array([center[0], center[1], floor_height]),
                       instance_id=instance_id, distance_to_centroid=dist)

    home_i = int(np.floor((cx - vmap.origin[0]) / h))
    home_j = int(np.floor((cy - vmap.origin[1]) / h))
    if (home_i, home_j) not in blocked:
        center = cell_center(home_i, home_j)
        return goal(home_i, home_j,
                    float(np.hypot(center[0] - cx, center[1] - cy)))

    i_lo = int(np.floor((cx - max_radius - vmap.origin[0]) / h)) - 1
    i_hi = int(np.floor((cx + max_radius - vmap.origin[0]) / h)) + 1
    j_lo = int(np.floor((cy - max_radius - vmap.origin[1]) / h)) - 1
    j_hi = int(np.floor((cy + max_radius - vmap.origin[1]) / h)) + 1
    candidates = []
    for i in range(i_lo, i_hi + 1):
        for j in range(j_lo, j_hi + 1):
            center = cell_center(i, j)
            dist = float(np.hypot(center[0] - cx, center[1] - cy))
            if dist <= max_radius + 1e-12:
                candidates.append((dist, i, j))
    candidates.sort()
    for dist, i, j in candidates:
        if (i, j) not in blocked:
            return goal(i, j, dist)
    raise GoalUnreachable(
        f"no free cell within {max_radius} m of instance {instance_id}")


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def save_map(vmap: VoxelSemanticMap, path) -> None:
    vote_rows = []
    for (i, j, k), cell in vmap.cells.items():
        for instance_id, count in cell.votes.items():
            vote_rows.append((i, j, k, instance_id, count))
    occ_rows = [key for key, cell in vmap.cells.items()
                if cell.occupied and not cell.votes]
    np.savez_compressed(
        path,
        format_version=np.int64(_MAP_FORMAT_VERSION),
        voxel_size=np.float64(vmap.voxel_size),
        origin=vmap.origin,
        next_label=np.int64(vmap.next_label),
        vote_rows=np.array(vote_rows, dtype=np.int64).reshape(-1, 5),
        occupied_rows=np.array(occ_rows, dtype=np.int64).reshape(-1, 3),
    )


def load_map(path) -> VoxelSemanticMap:
    with np.load(path) as data:
        version = int(data["format_version"])
        if version != _MAP_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported map format version {version}")
        vmap = VoxelSemanticMap(float(data["voxel_size"]), data["origin"])
        for i, j, k, instance_id, count in data["vote_rows"]:
            vmap.add_vote((i, j, k), int(instance_id), int(count))
        for index in data["occupied_rows"]:
            vmap.mark_occupied(index)
        vmap.next_label = int(data["next_label"])
    return vmap
