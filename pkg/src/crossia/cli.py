"""Command-line surface: strict config handling and the pipeline stages.

Stages communicate only through files below one run directory, keyed by the
fingerprint of the fully resolved config, so the same config and seed always
lands in (and reproduces) the same artifacts:

    runs/<fingerprint>/{world,db,checkpoints,reports,latent}

Exit codes: 0 success, 2 usage, 3 missing dependency artifact, 4 config
error, 5 runtime/numeric error.
"""

from __future__ import annotations

import argparse
import copy
import hashlib
import json
import sys
from dataclasses import dataclass
from pathlib import Path

import cv2
import numpy as np
import yaml

from .adapters import DeblurrerHandle, SegmenterHandle, deblur, segment
from .database import (CollectionConfig, ObjectImageDatabase, add_user_images,
                       collect_database, load_database, save_database)
from .errors import (ConfigError, InvalidArgument, MissingArtifact, NotFound,
                     PipelineError)
from .evaluation import (Query, few_shot_ablation, plot_benchmark, plot_latent,
                         export_latent_projection, format_report_table,
                         run_benchmark, save_reports)
from .geometry import CameraIntrinsics, save_trajectory, load_trajectory
from .learning import (ArchitectureConfig, AugmentParams, EncoderBundle,
                       TrainingConfig, calibrate_feature_center, load_bundle,
                       save_bundle, train)
from .mapping import (SegmentMask, VoxelSemanticMap, associate_labels,
                      integrate_frame, load_map, match_instance, raytrace_mask,
                      save_map)
from .retrieval import db_digest, embed, locate
from .world import (DegradationSpec, RgbdFrame, closeup_poses, degrade,
                    generate_scene, load_scene, render_frame, render_sequence,
                    save_scene, survey_trajectory)

COMMANDS = ("gen-world", "collect", "finetune", "evaluate", "ablate",
            "locate", "export-latent")

_DEFAULTS = {
    "preset": "desk",
    "seed": 0,
    "output_root": "runs",
    "world": {
        "n_instances": 12,
        "n_frames": 100,
        "image_width": 160,
        "image_height": 120,
        "focal_length": 110.0,
        "orbit_radius": 2.2,
        "ring_heights": [1.0, 1.7],
        "blur_sigma": 2.0,
        "blur_kernel": 9,
        "downsample_factor": 4,
        "noise_sigma": 5.0,
    },
    "mapping": {
        "voxel_size": 0.03,
        "depth_min": 0.3,
        "depth_max": 5.0,
        "trace_max_range": 10.0,
        "iou_threshold": 0.25,
    },
    "adapters": {
        "segmenter": "oracle",
        "deblurrer": "identity",
        "unsharp_radius": 2.0,
        "unsharp_amount": 1.0,
    },
    "database": {
        "min_bbox_size": 10,
        "user_shots": 5,
    },
    # The desk preset pairs lr 0.05 with mean reduction: summing the loss
    # over 64 pairs multiplies gradients ~64x and SGD diverges at this lr,
    # so the literal per-pair sum is kept as the loss definition (and its
    # oracle) while presets document which reduction they train with.
    "training": {
        "learning_rate": 0.05,
        "momentum": 0.9,
        "batch_pairs": 64,
        "epochs": 50,
        "steps_per_epoch": 4,
        "shots": 5,
        "adversarial": False,
        "adversarial_lambda": 1.0,
        "reduction": "mean",
    },
    "augment": {
        "out_size": 64,
        "crop_scale_min": 0.6,
        "crop_scale_max": 1.0,
        "flip_prob": 0.5,
        "jitter_prob": 0.8,
        "jitter_strength": 0.4,
        "grayscale_prob": 0.2,
    },
    "arch": {
        "input_size": 64,
        "feature_dim": 128,
        "proj_dim": 64,
    },
    "evaluation": {
        "queries_per_instance": 8,
        "aggregate": "max",
        "ablation_shots": [1, 3, 5],
    },
}

# Full-scale hyperparameters; everything else inherits the desk defaults.
_PRESETS = {
    "desk": {},
    "paper": {"training": {"learning_rate": 0.07, "batch_pairs": 256,
                           "epochs": 1000}},
}


# ---------------------------------------------------------------------------
# Config parsing
# ---------------------------------------------------------------------------

def _coerce(default, value, path: str, errors: list):
    if isinstance(default, bool):
        if not isinstance(value, bool):
            errors.append(f"{path}: expected a boolean, got {value!r}")
            return default
        return value
    if isinstance(default, float):
        if isinstance(value, bool) or not isinstance(value, (int, float)):
            errors.append(f"{path}: expected a number, got {value!r}")
            return default
        return float(value)
    if isinstance(default, int):
        if isinstance(value, bool) or not isinstance(value, int):
            errors.append(f"{path}: expected an integer, got {value!r}")
            return default
        return value
    if isinstance(default, str):
        if not isinstance(value, str):
            errors.append(f"{path}: expected a string, got {value!r}")
            return default
        return value
    if isinstance(default, list):
        if not isinstance(value, list):
            errors.append(f"{path}: expected a list, got {value!r}")
            return default
        return value
    errors.append(f"{path}: unsupported config value {value!r}")
    return default


def _merge(base: dict, override: dict, prefix: str, errors: list) -> None:
    for key, value in override.items():
        if key not in base:
            errors.append(f"unknown config key: {prefix}{key}")
            continue
        if isinstance(base[key], dict):
            if not isinstance(value, dict):
                errors.append(f"{prefix}{key}: expected a section")
                continue
            _merge(base[key], value, f"{prefix}{key}.", errors)
        else:
            base[key] = _coerce(base[key], value, f"{prefix}{key}", errors)


@dataclass(frozen=True)
class RunConfig:
    """Fully resolved configuration; sections are plain dicts, with typed
    accessors for the objects the pipeline consumes."""

    resolved: dict

    @property
    def seed(self) -> int:
        return self.resolved["seed"]

    @property
    def preset(self) -> str:
        return self.resolved["preset"]

    def section(self, name: str) -> dict:
        return self.resolved[name]

    def intrinsics(self) -> CameraIntrinsics:
        w = self.section("world")
        return CameraIntrinsics(
            width=w["image_width"], height=w["image_height"],
            fx=w["focal_length"], fy=w["focal_length"],
            cx=(w["image_width"] - 1) / 2.0, cy=(w["image_height"] - 1) / 2.0)

    def degradation(self) -> DegradationSpec:
        w = self.section("world")
        return DegradationSpec(blur_sigma=w["blur_sigma"],
                               blur_kernel=w["blur_kernel"],
                               downsample_factor=w["downsample_factor"],
                               noise_sigma=w["noise_sigma"], seed=self.seed)

    def segmenter(self) -> SegmenterHandle:
        return SegmenterHandle(kind=self.section("adapters")["segmenter"])

    def deblurrer(self) -> DeblurrerHandle:
        a = self.section("adapters")
        return DeblurrerHandle(kind=a["deblurrer"], radius=a["unsharp_radius"],
                               amount=a["unsharp_amount"])

    def augment(self) -> AugmentParams:
        a = self.section("augment")
        return AugmentParams(out_size=a["out_size"],
                             crop_scale=(a["crop_scale_min"], a["crop_scale_max"]),
                             flip_prob=a["flip_prob"],
                             jitter_prob=a["jitter_prob"],
                             jitter_strength=a["jitter_strength"],
                             grayscale_prob=a["grayscale_prob"])

    def training(self) -> TrainingConfig:
        t = self.section("training")
        return TrainingConfig(learning_rate=t["learning_rate"],
                              momentum=t["momentum"],
                              batch_pairs=t["batch_pairs"], epochs=t["epochs"],
                              steps_per_epoch=t["steps_per_epoch"],
                              shots=t["shots"], adversarial=t["adversarial"],
                              adversarial_lambda=t["adversarial_lambda"],
                              reduction=t["reduction"], augment=self.augment(),
                              seed=self.seed)

    def arch(self) -> ArchitectureConfig:
        a = self.section("arch")
        return ArchitectureConfig(
            input_size=a["input_size"], feature_dim=a["feature_dim"],
            proj_dim=a["proj_dim"],
            with_domain_head=self.section("training")["adversarial"])

    def fingerprint(self) -> str:
        canon = json.dumps(self.resolved, sort_keys=True).encode()
        return hashlib.sha256(canon).hexdigest()

    def run_dir(self) -> Path:
        return Path(self.resolved["output_root"]) / self.fingerprint()[:12]


def parse_config(path=None, overrides: dict | None = None) -> RunConfig:
    """Load, default-expand and validate a config file; all validation
    problems are reported together in one config error."""
    doc = {}
    if path is not None:
        p = Path(path)
        if not p.is_file():
            raise ConfigError(f"config file not found: {p}")
        loaded = yaml.safe_load(p.read_text())
        if loaded is None:
            loaded = {}
        if not isinstance(loaded, dict):
            raise ConfigError(f"{p}: config root must be a mapping")
        doc = loaded
    overrides = overrides or {}

    preset = overrides.get("preset") or doc.get("preset") or _DEFAULTS["preset"]
    if preset not in _PRESETS:
        raise ConfigError(f"unknown preset {preset!r} "
                          f"(choose from {sorted(_PRESETS)})")
    resolved = copy.deepcopy(_DEFAULTS)
    resolved["preset"] = preset
    errors: list = []
    _merge(resolved, copy.deepcopy(_PRESETS[preset]), "", errors)
    _merge(resolved, doc, "", errors)
    _merge(resolved, overrides, "", errors)
    if errors:
        raise ConfigError("invalid config:\n  " + "\n  ".join(errors))
    cfg = RunConfig(resolved)
    try:
        cfg.training(), cfg.arch(), cfg.intrinsics(), cfg.degradation()
        cfg.segmenter(), cfg.deblurrer()
    except (InvalidArgument, PipelineError) as exc:
        raise ConfigError(f"invalid config: {exc}") from exc
    return cfg


# ---------------------------------------------------------------------------
# Run-directory plumbing
# ---------------------------------------------------------------------------

def _prepare_run_dir(cfg: RunConfig) -> Path:
    run_dir = cfg.run_dir()
    run_dir.mkdir(parents=True, exist_ok=True)
    (run_dir / "config.yaml").write_text(
        yaml.safe_dump(cfg.resolved, sort_keys=True))
    return run_dir


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifact(f"{path} not found — run `{hint}` first")
    return path


def _load_world(cfg: RunConfig):
    run_dir = cfg.run_dir()
    scene = load_scene(_require(run_dir / "world" / "scene.yaml", "gen-world"))
    trajectory = load_trajectory(
        _require(run_dir / "world" / "trajectory.txt", "gen-world"))
    with np.load(_require(run_dir / "world" / "frames.npz", "gen-world")) as d:
        data = {key: d[key] for key in d.files}
    return scene, trajectory, data


def _object_crop(rgb: np.ndarray, mask: SegmentMask, instance_id: int,
                 margin: int = 3) -> np.ndarray:
    ys, xs = np.nonzero(mask.ids == instance_id)
    if ys.size == 0:
        return rgb
    h, w = rgb.shape[:2]
    y0, y1 = max(int(ys.min()) - margin, 0), min(int(ys.max()) + margin, h - 1)
    x0, x1 = max(int(xs.min()) - margin, 0), min(int(xs.max()) + margin, w - 1)
    return rgb[y0:y1 + 1, x0:x1 + 1]


def _closeup_crops(scene, instance_id: int, n_views: int, seed: int,
                   intrinsics: CameraIntrinsics) -> list:
    """Clean object-centric renders standing in for user photos/queries."""
    crops = []
    for pose in closeup_poses(scene, instance_id, n_views, seed):
        frame, mask = render_frame(scene, pose, intrinsics)
        crops.append(_object_crop(frame.rgb, mask, instance_id))
    return crops


def build_queries(cfg: RunConfig, scene, vmap: VoxelSemanticMap) -> list:
    """Clean close-up crops labelled with the map id of the pictured object.

    Queries stand in for photos a user takes of an object; the ground-truth
    answer of "which map instance is this" comes from matching the object's
    position against the map centroids, the same link `collect` uses to file
    the user's reference shots.
    """
    per = cfg.section("evaluation")["queries_per_instance"]
    intrinsics = cfg.intrinsics()
    queries = []
    for obj in scene.objects:
        try:
            gid = match_instance(vmap, obj.center)
        except NotFound:
            continue
        crops = _closeup_crops(scene, obj.instance_id, per,
                               cfg.seed + 9900 + obj.instance_id, intrinsics)
        queries.extend(
            Query(crop, gid, ref=f"q{obj.instance_id}_{j}")
            for j, crop in enumerate(crops))
    return queries


# ---------------------------------------------------------------------------
# Stages
# ---------------------------------------------------------------------------

def stage_gen_world(cfg: RunConfig) -> None:
    run_dir = _prepare_run_dir(cfg)
    world_dir = run_dir / "world"
    world_dir.mkdir(exist_ok=True)
    w = cfg.section("world")
    scene = generate_scene(cfg.seed, w["n_instances"])
    save_scene(scene, world_dir / "scene.yaml")
    trajectory = survey_trajectory(w["n_frames"], cfg.seed,
                                   radius=w["orbit_radius"],
                                   heights=w["ring_heights"])
    save_trajectory(trajectory, world_dir / "trajectory.txt")
    intrinsics = cfg.intrinsics()
    spec = cfg.degradation()
    rendered = render_sequence(scene, trajectory, intrinsics)
    clean = np.stack([frame.rgb for frame, _ in rendered])
    robot = np.stack([degrade(frame.rgb, spec.with_seed(cfg.seed * 1000 + i))
                      for i, (frame, _) in enumerate(rendered)])
    depth = np.stack([frame.depth for frame, _ in rendered])
    masks = np.stack([mask.ids for _, mask in rendered])
    timestamps = np.asarray(trajectory.timestamps)
    np.savez_compressed(world_dir / "frames.npz", clean_rgb=clean,
                        robot_rgb=robot, depth=depth, gt_masks=masks,
                        timestamps=timestamps)
    print(f"world: {len(rendered)} frames, {len(scene.objects)} instances "
          f"-> {world_dir}")


def build_map(cfg: RunConfig, trajectory, data) -> VoxelSemanticMap:
    """Integrate every robot frame: deblur, segment, associate against the
    ray-traced mask, accumulate votes."""
    m = cfg.section("mapping")
    intrinsics = cfg.intrinsics()
    segmenter, deblurrer = cfg.segmenter(), cfg.deblurrer()
    vmap = VoxelSemanticMap(voxel_size=m["voxel_size"])
    for i, pose in enumerate(trajectory.poses):
        rgb = deblur(deblurrer, data["robot_rgb"][i])
        gt = SegmentMask(data["gt_masks"][i])
        fresh = segment(segmenter, rgb, gt_mask=gt)
        if vmap.is_empty:
            traced = SegmentMask(np.zeros_like(fresh.ids))
        else:
            traced = raytrace_mask(vmap, pose, intrinsics,
                                   max_range=m["trace_max_range"])
        global_mask = associate_labels(vmap, fresh, traced,
                                       iou_threshold=m["iou_threshold"])
        frame = RgbdFrame(rgb, data["depth"][i], pose, intrinsics,
                          float(data["timestamps"][i]))
        integrate_frame(vmap, frame, global_mask,
                        depth_range=(m["depth_min"], m["depth_max"]))
    return vmap


def stage_collect(cfg: RunConfig) -> None:
    run_dir = _prepare_run_dir(cfg)
    scene, trajectory, data = _load_world(cfg)
    intrinsics = cfg.intrinsics()
    vmap = build_map(cfg, trajectory, data)
    db_dir = run_dir / "db"
    db_dir.mkdir(exist_ok=True)
    save_map(vmap, db_dir / "map.npz")

    frames = [RgbdFrame(data["robot_rgb"][i], data["depth"][i], pose,
                        intrinsics, float(data["timestamps"][i]))
              for i, pose in enumerate(trajectory.poses)]
    d = cfg.section("database")
    db = collect_database(
        frames, vmap, cfg.segmenter(), cfg.deblurrer(),
        CollectionConfig(output_dir=db_dir, min_bbox_size=d["min_bbox_size"],
                         trace_max_range=cfg.section("mapping")["trace_max_range"],
                         map_reference="map.npz"))
    shots = d["user_shots"]
    for obj in scene.objects:
        try:
            gid = match_instance(vmap, obj.center)
        except NotFound:
            continue  # object never made it into the map
        if gid not in db.instances:
            continue
        crops = _closeup_crops(scene, obj.instance_id, shots,
                               cfg.seed + 7700 + obj.instance_id, intrinsics)
        add_user_images(db, gid, crops, shots)
    save_database(db, db_dir)
    n_low = len(db.crops("low"))
    n_high = len(db.crops("high"))
    print(f"db: {len(db.instance_ids)} instances, {n_low} robot crops, "
          f"{n_high} user images -> {db_dir}")


def stage_finetune(cfg: RunConfig) -> None:
    run_dir = _prepare_run_dir(cfg)
    db = load_database(_require(run_dir / "db", "collect"))
    bundle, log = train(db, cfg.training(), arch=cfg.arch())
    ckpt_dir = run_dir / "checkpoints"
    ckpt_dir.mkdir(exist_ok=True)
    save_bundle(bundle, ckpt_dir / "crossia.pt", config=cfg.training(),
                db_digest=db_digest(db))
    header = "epoch,robot_cosine,robot_ce,cross_cosine,cross_ce,adversarial,total"
    rows = [header] + [
        f"{row['epoch']},{row['robot_cosine']:.6f},{row['robot_ce']:.6f},"
        f"{row['cross_cosine']:.6f},{row['cross_ce']:.6f},"
        f"{row['adversarial']:.6f},{row['total']:.6f}" for row in log]
    (ckpt_dir / "training_log.csv").write_text("\n".join(rows) + "\n")
    print(f"finetune: {len(log)} epochs, final loss {log[-1]['total']:.4f} "
          f"-> {ckpt_dir / 'crossia.pt'}")


def stage_evaluate(cfg: RunConfig) -> None:
    run_dir = _prepare_run_dir(cfg)
    db = load_database(_require(run_dir / "db", "collect"))
    vmap = load_map(_require(run_dir / "db" / "map.npz", "collect"))
    ckpt = _require(run_dir / "checkpoints" / "crossia.pt", "finetune")
    scene = load_scene(_require(run_dir / "world" / "scene.yaml", "gen-world"))
    queries = build_queries(cfg, scene, vmap)
    baseline = EncoderBundle(cfg.arch(), db.instance_ids, seed=cfg.seed)
    calibrate_feature_center(baseline,
                             [db.load_image(r) for r in db.crops()])
    conditions = [
        {"label": "Baseline (no fine-tuning)", "bundle": baseline},
        {"label": "CrossIA", "bundle": str(ckpt)},
    ]
    reports = run_benchmark(conditions, queries, db, vmap=vmap)
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(exist_ok=True)
    save_reports(reports, reports_dir / "benchmark.txt",
                 reports_dir / "benchmark.json")
    plot_benchmark(reports, reports_dir / "benchmark.png")
    sys.stdout.write(format_report_table(reports))


def stage_ablate(cfg: RunConfig) -> None:
    run_dir = _prepare_run_dir(cfg)
    db = load_database(_require(run_dir / "db", "collect"))
    vmap = load_map(_require(run_dir / "db" / "map.npz", "collect"))
    scene = load_scene(_require(run_dir / "world" / "scene.yaml", "gen-world"))
    queries = build_queries(cfg, scene, vmap)
    shots_list = cfg.section("evaluation")["ablation_shots"]
    reports = few_shot_ablation(db, shots_list, cfg.training(), queries,
                                arch=cfg.arch())
    reports_dir = run_dir / "reports"
    reports_dir.mkdir(exist_ok=True)
    save_reports(reports, reports_dir / "ablation.txt",
                 reports_dir / "ablation.json")
    plot_benchmark(reports, reports_dir / "ablation.png")
    sys.stdout.write(format_report_table(reports))


def stage_locate(cfg: RunConfig, query_path: str) -> None:
    run_dir = _prepare_run_dir(cfg)
    db = load_database(_require(run_dir / "db", "collect"))
    vmap = load_map(_require(run_dir / "db" / "map.npz", "collect"))
    ckpt = _require(run_dir / "checkpoints" / "crossia.pt", "finetune")
    bundle, _ = load_bundle(ckpt)
    bgr = cv2.imread(str(query_path), cv2.IMREAD_COLOR)
    if bgr is None:
        raise InvalidArgument(f"cannot read query image {query_path}")
    ranking, goal = locate(cv2.cvtColor(bgr, cv2.COLOR_BGR2RGB), bundle, db,
                           vmap)
    record = {
        "query": str(query_path),
        "ranking": [{"instance_id": i, "score": round(s, 6)}
                    for i, s in ranking.ranking[:5]],
        "instance_id": goal.instance_id,
        "goal": [round(float(v), 4) for v in goal.target],
        "distance_to_centroid": round(goal.distance_to_centroid, 4),
    }
    print(json.dumps(record, indent=2))


def stage_export_latent(cfg: RunConfig) -> None:
    run_dir = _prepare_run_dir(cfg)
    db = load_database(_require(run_dir / "db", "collect"))
    ckpt = _require(run_dir / "checkpoints" / "crossia.pt", "finetune")
    bundle, _ = load_bundle(ckpt)
    records = db.crops()
    images = [db.load_image(c) for c in records]
    vectors = np.stack([e.values for e in
                        embed(bundle, images, sources=[c.path for c in records])])
    ids = [c.instance_id for c in records]
    domains = [c.domain for c in records]
    latent_dir = run_dir / "latent"
    latent_dir.mkdir(exist_ok=True)
    points = export_latent_projection(vectors, ids, domains,
                                      latent_dir / "latent.csv")
    plot_latent(points, ids, domains, latent_dir / "latent.png")
    print(f"latent: {len(points)} points -> {latent_dir}")


# ---------------------------------------------------------------------------
# Dispatch
# ---------------------------------------------------------------------------

def dispatch(command: str, cfg: RunConfig, query: str | None = None) -> int:
    handlers = {
        "gen-world": stage_gen_world,
        "collect": stage_collect,
        "finetune": stage_finetune,
        "evaluate": stage_evaluate,
        "ablate": stage_ablate,
        "export-latent": stage_export_latent,
    }
    try:
        if command == "locate":
            if not query:
                print("error: locate requires --query", file=sys.stderr)
                return 2
            stage_locate(cfg, query)
        elif command in handlers:
            handlers[command](cfg)
        else:
            print(f"error: unknown command {command!r}; choose from "
                  f"{', '.join(COMMANDS)}", file=sys.stderr)
            return 2
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    except (PipelineError, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 5
    return 0


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="crossia",
        description="Synthetic-world instance retrieval pipeline: generate a "
                    "scene, map it, collect an object-image database, "
                    "fine-tune the encoder, and evaluate retrieval.")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", type=str, default=None,
                       help="YAML config file (defaults apply when omitted)")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--preset", choices=sorted(_PRESETS), default=None)
        p.add_argument("--shots", type=int, choices=(1, 3, 5), default=None,
                       help="high-quality images per instance for fine-tuning")
        p.add_argument("--adversarial", choices=("on", "off"), default=None)
        p.add_argument("--deblur", choices=("identity", "unsharp", "external"),
                       default=None)
        if name == "locate":
            p.add_argument("--query", type=str, required=True,
                           help="query image file")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    overrides: dict = {}
    if args.seed is not None:
        overrides["seed"] = args.seed
    if args.preset is not None:
        overrides["preset"] = args.preset
    if args.shots is not None:
        overrides.setdefault("training", {})["shots"] = args.shots
    if args.adversarial is not None:
        overrides.setdefault("training", {})["adversarial"] = \
            args.adversarial == "on"
    if args.deblur is not None:
        overrides.setdefault("adapters", {})["deblurrer"] = args.deblur
    try:
        cfg = parse_config(args.config, overrides)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 4
    return dispatch(args.command, cfg, query=getattr(args, "query", None))


if __name__ == "__main__":
    sys.exit(main())
