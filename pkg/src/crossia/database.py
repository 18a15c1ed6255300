"""Object-image database: low-quality robot crops with map-derived
pseudo-labels, few-shot high-quality user images, and per-instance centroids.

The database is an on-disk directory — lossless PNG crops plus one YAML
manifest — so a collection run is inspectable and diff-able. Loaded databases
are immutable snapshots; `add_user_images` and `with_shots` return updated
views without touching existing crop files.
"""

from __future__ import annotations

import hashlib
import shutil
from dataclasses import dataclass, field
from pathlib import Path

import cv2
import numpy as np
import yaml

from .adapters import DeblurrerHandle, SegmenterHandle, deblur
from .errors import (FormatError, IntegrityError, InvalidArgument, NotFound)
from .mapping import BBox, VoxelSemanticMap, instance_centroid, mask_to_bboxes, raytrace_mask

_DB_FORMAT_VERSION = 1


@dataclass(frozen=True)
class CollectionConfig:
    output_dir: Path
    min_bbox_size: int = 10
    trace_max_range: float = 10.0
    map_reference: str | None = None

    def __post_init__(self):
        object.__setattr__(self, "output_dir", Path(self.output_dir))
        if self.min_bbox_size < 1:
            raise InvalidArgument("min_bbox_size must be >= 1")


@dataclass(frozen=True)
class CropRecord:
    """One stored image of one instance.

    `path` is relative to the database root. Low-domain records carry the
    source frame and bounding box; high-domain records carry a shot index.
    """

    instance_id: int
    path: str
    domain: str  # "low" | "high"
    digest: str
    source_frame: int | None = None
    bbox: BBox | None = None
    shot_index: int | None = None

    def __post_init__(self):
        if self.domain not in ("low", "high"):
            raise InvalidArgument(f"unknown crop domain {self.domain!r}")
        if self.domain == "low" and (self.source_frame is None or self.bbox is None):
            raise InvalidArgument("low-quality crops need a source frame and bbox")
        if self.domain == "high" and (self.source_frame is not None
                                      or self.bbox is not None
                                      or self.shot_index is None):
            raise InvalidArgument("high-quality records carry only a shot index")


@dataclass
class InstanceEntry:
    instance_id: int
    centroid: np.ndarray  # (3,) meters
    crops: list = field(default_factory=list)

    def low(self) -> list:
        return [c for c in self.crops if c.domain == "low"]

    def high(self) -> list:
        return [c for c in self.crops if c.domain == "high"]


@dataclass
class ObjectImageDatabase:
    root: Path
    instances: dict  # instance_id -> InstanceEntry
    meta: dict = field(default_factory=dict)

    @property
    def instance_ids(self) -> list:
        return sorted(self.instances)

    def entry(self, instance_id: int) -> InstanceEntry:
        try:
            return self.instances[instance_id]
        except KeyError:
            raise NotFound(f"instance {instance_id} not in database") from None

    def crops(self, domain: str | None = None) -> list:
        out = []
        for instance_id in self.instance_ids:
            for crop in self.instances[instance_id].crops:
                if domain is None or crop.domain == domain:
                    out.append(crop)
        return out

    def load_image(self, record: CropRecord) -> np.ndarray:
        path = self.root / record.path
        bgr = cv2.imread(str(path), cv2.IMREAD_COLOR)
        if bgr is None:
            raise IntegrityError(f"missing or unreadable crop file: {path}")
        return cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB)

    def with_shots(self, shots: int) -> "ObjectImageDatabase":
        """View keeping only the first `shots` high-quality images per
        instance (shots=0 removes them all; low crops are untouched)."""
        if shots < 0:
            raise InvalidArgument("shots must be >= 0")
        instances = {}
        for instance_id, entry in self.instances.items():
            kept = [c for c in entry.crops
                    if c.domain == "low" or (c.shot_index is not None
                                             and c.shot_index < shots)]
            instances[instance_id] = InstanceEntry(instance_id,
                                                   entry.centroid.copy(), kept)
        return ObjectImageDatabase(self.root, instances, dict(self.meta))

    def equals(self, other: "ObjectImageDatabase") -> bool:
        """Field-for-field equality; image content compared by digest."""
        if self.instance_ids != other.instance_ids:
            return False
        for instance_id in self.instance_ids:
            a, b = self.instances[instance_id], other.instances[instance_id]
            if not np.allclose(a.centroid, b.centroid, atol=1e-9):
                return False
            if len(a.crops) != len(b.crops):
                return False
            for ca, cb in zip(a.crops, b.crops):
                if (ca.instance_id, ca.path, ca.domain, ca.digest,
                        ca.source_frame, ca.bbox, ca.shot_index) != \
                        (cb.instance_id, cb.path, cb.domain, cb.digest,
                         cb.source_frame, cb.bbox, cb.shot_index):
                    return False
        return True


def _sha256(path: Path) -> str:
    return hashlib.sha256(path.read_bytes()).hexdigest()


def _write_png(path: Path, rgb: np.ndarray) -> str:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not cv2.imwrite(str(path), cv2.cvtColor(rgb, cv2.COLOR_RGB2BGR)):
        raise IntegrityError(f"failed to write {path}")
    return _sha256(path)


def collect_database(frames, vmap: VoxelSemanticMap, segmenter: SegmenterHandle,
                     deblurrer: DeblurrerHandle,
                     config: CollectionConfig) -> ObjectImageDatabase:
    """Harvest per-instance crops from mapped frames.

    Each frame is deblurred, then its instance regions are recovered by ray
    tracing the already-integrated map, so every crop's pseudo-label is the
    map-global id by construction — no second association pass against the
    segmenter is needed (the handle is part of the collection record and of
    the mapping stage that preceded this call). Boxes smaller than
    `min_bbox_size` on either side are dropped.
    """
    frames = list(frames)
    if not frames:
        raise InvalidArgument("cannot collect a database from zero frames")
    root = config.output_dir
    root.mkdir(parents=True, exist_ok=True)

    instances = {
        instance_id: InstanceEntry(instance_id,
                                   instance_centroid(vmap, instance_id))
        for instance_id in vmap.instance_ids()
    }
    for frame_index, frame in enumerate(frames):
        rgb = deblur(deblurrer, frame.rgb)
        traced = raytrace_mask(vmap, frame.pose, frame.intrinsics,
                               max_range=config.trace_max_range)
        for k, box in enumerate(mask_to_bboxes(traced,
                                               min_size=config.min_bbox_size)):
            entry = instances.get(box.instance_id)
            if entry is None:
                continue
            crop = rgb[box.y_min:box.y_max + 1, box.x_min:box.x_max + 1]
            rel = f"crops/{box.instance_id}/{frame_index:06d}_{k}.png"
            digest = _write_png(root / rel, crop)
            entry.crops.append(CropRecord(box.instance_id, rel, "low", digest,
                                          source_frame=frame_index, bbox=box))
    # Spurious map labels (a segment that failed association for a single
    # frame) own a few voxels but never project to a box that clears
    # `min_bbox_size`; an entry with no images cannot be retrieved, so drop it.
    instances = {i: e for i, e in instances.items() if e.crops}
    meta = {
        "map_reference": config.map_reference,
        "min_bbox_size": config.min_bbox_size,
        "segmenter_kind": segmenter.kind,
        "deblurrer_kind": deblurrer.kind,
        "n_frames": len(frames),
    }
    return ObjectImageDatabase(root, instances, meta)


def add_user_images(db: ObjectImageDatabase, instance_id: int, images,
                    shots: int) -> ObjectImageDatabase:
    """Record the first `shots` of `images` as high-quality views of one
    instance, replacing any previously recorded ones for it."""
    entry = db.entry(instance_id)
    images = list(images)
    if not 1 <= shots <= len(images):
        raise InvalidArgument(
            f"shots must be in [1, {len(images)}], got {shots}")
    entry.crops = entry.low()
    for shot_index in range(shots):
        rel = f"user/{instance_id}/{shot_index}.png"
        digest = _write_png(db.root / rel, images[shot_index])
        entry.crops.append(CropRecord(instance_id, rel, "high", digest,
                                      shot_index=shot_index))
    return db


# ---------------------------------------------------------------------------
# Persistence
# ---------------------------------------------------------------------------

def _crop_to_doc(crop: CropRecord) -> dict:
    doc = {"instance_id": crop.instance_id, "path": crop.path,
           "domain": crop.domain, "digest": crop.digest}
    if crop.domain == "low":
        doc["source_frame"] = crop.source_frame
        doc["bbox"] = [crop.bbox.x_min, crop.bbox.y_min,
                       crop.bbox.x_max, crop.bbox.y_max]
    else:
        doc["shot_index"] = crop.shot_index
    return doc


def _crop_from_doc(doc: dict) -> CropRecord:
    if doc["domain"] == "low":
        x_min, y_min, x_max, y_max = doc["bbox"]
        bbox = BBox(x_min, y_min, x_max, y_max, doc["instance_id"])
        return CropRecord(doc["instance_id"], doc["path"], "low", doc["digest"],
                          source_frame=doc["source_frame"], bbox=bbox)
    return CropRecord(doc["instance_id"], doc["path"], "high", doc["digest"],
                      shot_index=doc["shot_index"])


def save_database(db: ObjectImageDatabase, path) -> None:
    """Write manifest (and copy image files when saving to a new root)."""
    root = Path(path)
    root.mkdir(parents=True, exist_ok=True)
    if root.resolve() != db.root.resolve():
        for crop in db.crops():
            src = db.root / crop.path
            dst = root / crop.path
            dst.parent.mkdir(parents=True, exist_ok=True)
            shutil.copy2(src, dst)
    doc = {
        "format_version": _DB_FORMAT_VERSION,
        "meta": db.meta,
        "instances": [
            {
                "instance_id": instance_id,
                "centroid": [float(v) for v in db.instances[instance_id].centroid],
                "crops": [_crop_to_doc(c) for c in db.instances[instance_id].crops],
            }
            for instance_id in db.instance_ids
        ],
    }
    (root / "manifest.yaml").write_text(yaml.safe_dump(doc, sort_keys=False))


def load_database(path) -> ObjectImageDatabase:
    root = Path(path)
    manifest = root / "manifest.yaml"
    if not manifest.is_file():
        raise FormatError(f"no database manifest at {manifest}")
    doc = yaml.safe_load(manifest.read_text())
    version = doc.get("format_version")
    if version != _DB_FORMAT_VERSION:
        raise FormatError(f"{manifest}: unsupported database format version {version}")
    instances = {}
    for entry_doc in doc.get("instances", []):
        instance_id = int(entry_doc["instance_id"])
        entry = InstanceEntry(instance_id,
                              np.asarray(entry_doc["centroid"], dtype=np.float64))
        for crop_doc in entry_doc.get("crops", []):
            crop = _crop_from_doc(crop_doc)
            crop_path = root / crop.path
            if not crop_path.is_file():
                raise IntegrityError(f"manifest references missing file: {crop_path}")
            if _sha256(crop_path) != crop.digest:
                raise IntegrityError(f"digest mismatch for {crop_path}")
            entry.crops.append(crop)
        instances[instance_id] = entry
    return ObjectImageDatabase(root, instances, doc.get("meta") or {})
