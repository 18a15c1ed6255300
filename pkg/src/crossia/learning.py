"""Contrastive fine-tuning core.

An encoder bundle (backbone + projector + predictor + linear instance
classifier, optionally a domain head behind gradient reversal) is fine-tuned
on two kinds of positive pairs drawn from the object-image database: robot
pairs (two low-quality crops of one instance) and cross pairs (one low-quality
crop with one high-quality user image). Each pair contributes a negative-free
symmetric cosine term with stop-gradient on the projector outputs plus the
classifier's cross-entropy against the pair's pseudo-label; the batch loss is
the plain sum over pairs (mean reduction is available as a config option).
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field, replace

import cv2
import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .database import ObjectImageDatabase
from .errors import CannotSample, FormatError, InvalidArgument, NumericError

_CHECKPOINT_FORMAT_VERSION = 1
_COSINE_EPS = 1e-12


# ---------------------------------------------------------------------------
# Augmentation
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class AugmentParams:
    """Stochastic view augmentation: crop-and-resize, horizontal flip,
    color jitter, grayscale."""

    out_size: int = 64
    crop_scale: tuple = (0.6, 1.0)   # area fraction kept
    crop_ratio: tuple = (0.75, 4.0 / 3.0)
    flip_prob: float = 0.5
    jitter_prob: float = 0.8
    jitter_strength: float = 0.4     # brightness/contrast/saturation range
    grayscale_prob: float = 0.2

    def __post_init__(self):
        if self.out_size < 1:
            raise InvalidArgument("out_size must be >= 1")
        if not 0 < self.crop_scale[0] <= self.crop_scale[1] <= 1:
            raise InvalidArgument("crop_scale must satisfy 0 < lo <= hi <= 1")


def _augment_once(image: np.ndarray, params: AugmentParams,
                  rng: np.random.Generator) -> np.ndarray:
    h, w = image.shape[:2]
    scale = rng.uniform(*params.crop_scale)
    ratio = rng.uniform(*params.crop_ratio)
    width_frac = min(1.0, np.sqrt(scale * ratio))
    height_frac = min(1.0, np.sqrt(scale / ratio))
    cw = max(1, int(round(w * width_frac)))
    ch = max(1, int(round(h * height_frac)))
    x0 = int(rng.integers(0, w - cw + 1))
    y0 = int(rng.integers(0, h - ch + 1))
    view = image[y0:y0 + ch, x0:x0 + cw].astype(np.float64)
    view = cv2.resize(view, (params.out_size, params.out_size),
                      interpolation=cv2.INTER_LINEAR)
    if rng.random() < params.flip_prob:
        view = view[:, ::-1]
    if rng.random() < params.jitter_prob:
        s = params.jitter_strength
        view = view * rng.uniform(1 - s, 1 + s)                     # brightness
        mean = view.mean()
        view = (view - mean) * rng.uniform(1 - s, 1 + s) + mean     # contrast
        gray = view.mean(axis=2, keepdims=True)
        view = gray + (view - gray) * rng.uniform(1 - s, 1 + s)     # saturation
    if rng.random() < params.grayscale_prob:
        view = np.repeat(view.mean(axis=2, keepdims=True), 3, axis=2)
    return np.clip(np.rint(view), 0, 255).astype(np.uint8)


def augment_views(image: np.ndarray, params: AugmentParams, seed: int):
    """Two independent stochastic views of one source image, deterministic for
    a fixed seed."""
    if image.size == 0:
        raise InvalidArgument("cannot augment an empty image")
    rng = np.random.default_rng(seed)
    return _augment_once(image, params, rng), _augment_once(image, params, rng)


def augment_image(image: np.ndarray, params: AugmentParams,
                  rng: np.random.Generator) -> np.ndarray:
    """Single augmented view (pair sampling augments each view's own source)."""
    if image.size == 0:
        raise InvalidArgument("cannot augment an empty image")
    return _augment_once(image, params, rng)


# ---------------------------------------------------------------------------
# Pair sampling
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ContrastivePair:
    view_a: np.ndarray
    view_b: np.ndarray
    label: int            # pseudo-label y*, shared by both views
    kind: str             # "robot" | "cross"
    domain_a: str         # "low" | "high"
    domain_b: str

    def __post_init__(self):
        if self.kind not in ("robot", "cross"):
            raise InvalidArgument(f"unknown pair kind {self.kind!r}")
        if self.kind == "robot" and (self.domain_a, self.domain_b) != ("low", "low"):
            raise InvalidArgument("robot pairs are low/low")
        if self.kind == "cross" and sorted((self.domain_a, self.domain_b)) != ["high", "low"]:
            raise InvalidArgument("cross pairs have exactly one high-quality view")


@dataclass(frozen=True)
class PairBatch:
    robot_pairs: tuple
    cross_pairs: tuple

    def __post_init__(self):
        if len(self.robot_pairs) + len(self.cross_pairs) < 1:
            raise InvalidArgument("a pair batch needs at least one pair")

    @property
    def m(self) -> int:
        return len(self.robot_pairs)

    @property
    def n(self) -> int:
        return len(self.cross_pairs)


def build_pairs(db: ObjectImageDatabase, batch_pairs: int, seed: int,
                loader=None) -> PairBatch:
    """Sample a stratified batch: half robot pairs, half cross pairs when any
    instance has both domains; all robot pairs otherwise (the condition with
    no user images). Deterministic per seed."""
    if batch_pairs < 1:
        raise InvalidArgument("batch_pairs must be >= 1")
    loader = loader or db.load_image
    rng = np.random.default_rng(seed)

    robot_eligible = [i for i in db.instance_ids if len(db.instances[i].low()) >= 2]
    cross_eligible = [i for i in db.instance_ids
                      if db.instances[i].low() and db.instances[i].high()]
    if not robot_eligible and not cross_eligible:
        raise CannotSample("no instance has two low-quality crops or both domains")

    n_cross = batch_pairs // 2 if cross_eligible else 0
    n_robot = batch_pairs - n_cross
    if not robot_eligible:
        n_cross, n_robot = batch_pairs, 0

    robot_pairs = []
    for _ in range(n_robot):
        instance_id = int(rng.choice(robot_eligible))
        lows = db.instances[instance_id].low()
        a, b = rng.choice(len(lows), size=2, replace=False)
        robot_pairs.append(ContrastivePair(loader(lows[a]), loader(lows[b]),
                                           instance_id, "robot", "low", "low"))
    cross_pairs = []
    for _ in range(n_cross):
        instance_id = int(rng.choice(cross_eligible))
        lows = db.instances[instance_id].low()
        highs = db.instances[instance_id].high()
        low = lows[int(rng.integers(len(lows)))]
        high = highs[int(rng.integers(len(highs)))]
        cross_pairs.append(ContrastivePair(loader(low), loader(high),
                                           instance_id, "cross", "low", "high"))
    return PairBatch(tuple(robot_pairs), tuple(cross_pairs))


# ---------------------------------------------------------------------------
# Model
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class ArchitectureConfig:
    input_size: int = 64
    feature_dim: int = 128
    proj_dim: int = 64
    with_domain_head: bool = False

    def __post_init__(self):
        if min(self.input_size, self.feature_dim, self.proj_dim) < 1:
            raise InvalidArgument("architecture dimensions must be positive")


class GradReverse(torch.autograd.Function):
    """Identity forward; backward multiplies the gradient by -constant."""

    @staticmethod
    def forward(ctx, x, constant):
        ctx.constant = constant
        return x.view_as(x)

    @staticmethod
    def backward(ctx, grad_output):
        return grad_output.neg() * ctx.constant, None


def grad_reverse(x: torch.Tensor, constant: float) -> torch.Tensor:
    return GradReverse.apply(x, constant)


def _conv_block(c_in: int, c_out: int) -> nn.Sequential:
    # Leaky activations so no input can pool to an all-zero feature vector
    # (a dead embedding has no direction and would poison cosine retrieval);
    # at the preset learning rates a plain ReLU backbone does go dead.
    return nn.Sequential(
        nn.Conv2d(c_in, c_out, kernel_size=3, stride=2, padding=1, bias=False),
        nn.BatchNorm2d(c_out),
        nn.LeakyReLU(0.1, inplace=True),
    )


class _FeatureCenter(nn.Module):
    """Mean-only running centering — batch-norm semantics without the
    variance division.

    Image crops from one scene share most of their appearance, so raw pooled
    features all point near one direction and the cosine between *any* two
    embeddings starts close to 1. Subtracting the running feature mean keeps
    only the per-image deviation, which is the part cosine retrieval can
    actually rank with."""

    def __init__(self, dim: int, momentum: float = 0.1):
        super().__init__()
        self.momentum = momentum
        self.register_buffer("running_mean", torch.zeros(dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if self.training:
            mean = x.mean(dim=0)
            with torch.no_grad():
                self.running_mean += self.momentum * (mean.detach()
                                                      - self.running_mean)
            return x - mean
        return x - self.running_mean


class EncoderBundle(nn.Module):
    """Backbone f, projector (f -> z), predictor h (z -> p), linear instance
    classifier on f, and an optional two-way domain head on f."""

    def __init__(self, arch: ArchitectureConfig, class_ids, seed: int = 0):
        super().__init__()
        class_ids = tuple(int(i) for i in class_ids)
        if len(class_ids) < 1 or len(set(class_ids)) != len(class_ids):
            raise InvalidArgument("class_ids must be non-empty and unique")
        torch.manual_seed(seed)
        self.arch = arch
        self.class_ids = class_ids
        self._class_index = {cid: k for k, cid in enumerate(class_ids)}
        d_f, d_z = arch.feature_dim, arch.proj_dim
        # The last block is left un-rectified (rectified channels all carry a
        # positive offset), the pooled vector is layer-normalized for scale
        # stability, and the running feature mean is subtracted so the
        # backbone output — the retrieval feature — measures deviation from
        # the typical crop rather than the crop-appearance common to the
        # whole scene. A never-trained bundle has a zero centering buffer;
        # see `calibrate_feature_center` before using one as a frozen
        # baseline.
        self.backbone = nn.Sequential(
            _conv_block(3, 32),
            _conv_block(32, 64),
            _conv_block(64, d_f),
            nn.Conv2d(d_f, d_f, kernel_size=3, stride=2, padding=1,
                      bias=False),
            nn.BatchNorm2d(d_f),
            nn.AdaptiveAvgPool2d(1),
            nn.Flatten(),
            nn.LayerNorm(d_f, elementwise_affine=False),
            _FeatureCenter(d_f),
        )
        self.projector = nn.Sequential(
            nn.Linear(d_f, d_z),
            nn.BatchNorm1d(d_z),
            nn.ReLU(inplace=True),
            nn.Linear(d_z, d_z),
        )
        self.predictor = nn.Sequential(
            nn.Linear(d_z, max(d_z // 2, 1)),
            nn.BatchNorm1d(max(d_z // 2, 1)),
            nn.ReLU(inplace=True),
            nn.Linear(max(d_z // 2, 1), d_z),
        )
        self.classifier = nn.Linear(d_f, len(class_ids))
        self.domain_head = nn.Linear(d_f, 2) if arch.with_domain_head else None

    @property
    def n_classes(self) -> int:
        return len(self.class_ids)

    def class_index(self, instance_id: int) -> int:
        try:
            return self._class_index[instance_id]
        except KeyError:
            raise InvalidArgument(
                f"instance {instance_id} unknown to this bundle") from None

    def features(self, x: torch.Tensor) -> torch.Tensor:
        return self.backbone(x)

    def forward(self, x: torch.Tensor) -> dict:
        """Per-view outputs {f, z, p, logits}; raises on non-finite
        activations, naming the stage."""
        f = self.backbone(x)
        _check_finite(f, "backbone")
        z = self.projector(f)
        _check_finite(z, "projector")
        p = self.predictor(z)
        _check_finite(p, "predictor")
        logits = self.classifier(f)
        _check_finite(logits, "classifier")
        return {"f": f, "z": z, "p": p, "logits": logits}


def _check_finite(t: torch.Tensor, stage: str) -> None:
    if not torch.isfinite(t).all():
        raise NumericError(f"non-finite activation in {stage}")


def images_to_tensor(images, dtype=torch.float32) -> torch.Tensor:
    """uint8 H x W x 3 images -> (K, 3, H, W) float in [-1, 1]."""
    stack = np.stack([np.asarray(im, dtype=np.float32) for im in images])
    tensor = torch.from_numpy(stack).permute(0, 3, 1, 2).to(dtype)
    return tensor / 127.5 - 1.0


def calibrate_feature_center(bundle: EncoderBundle, images,
                             batch_size: int = 64) -> EncoderBundle:
    """Anchor the backbone's centering buffer to the feature mean of `images`.

    Training keeps the buffer current as a running average, but a frozen
    random-weight bundle used as a no-fine-tuning baseline has never seen
    data and would center by zeros. Call this with the database crops (input
    already sized for the encoder or any size — images are resized) before
    embedding with such a bundle. No weights change; only the buffer moves,
    by the mean of the features the bundle currently produces, so calling it
    again on the same images is a no-op up to numerics.
    """
    if not images:
        raise InvalidArgument("cannot calibrate on zero images")
    size = bundle.arch.input_size
    resized = [
        im if im.shape[0] == size and im.shape[1] == size
        else cv2.resize(np.asarray(im), (size, size),
                        interpolation=cv2.INTER_LINEAR)
        for im in images
    ]
    bundle.eval()
    feats = []
    with torch.no_grad():
        for start in range(0, len(resized), batch_size):
            feats.append(bundle.backbone(
                images_to_tensor(resized[start:start + batch_size])))
    center = next(m for m in bundle.backbone.modules()
                  if isinstance(m, _FeatureCenter))
    with torch.no_grad():
        center.running_mean += torch.cat(feats).mean(dim=0)
    return bundle


# ---------------------------------------------------------------------------
# Losses
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class LossBreakdown:
    total: float
    robot_cosine: float
    robot_ce: float
    cross_cosine: float
    cross_ce: float
    adversarial: float = 0.0


def _normalize(v: torch.Tensor) -> torch.Tensor:
    norm = v.norm(dim=-1, keepdim=True)
    if bool((norm <= _COSINE_EPS).any()):
        raise NumericError("zero-norm vector in cosine similarity")
    return v / norm


def _pair_cosine(p_a: torch.Tensor, z_b: torch.Tensor,
                 p_b: torch.Tensor, z_a: torch.Tensor) -> torch.Tensor:
    """Symmetric negative cosine with stop-gradient on both z arguments;
    returns a per-pair vector."""
    cos_ab = (_normalize(p_a) * _normalize(z_b.detach())).sum(dim=-1)
    cos_ba = (_normalize(p_b) * _normalize(z_a.detach())).sum(dim=-1)
    return -0.5 * (cos_ab + cos_ba)


def _pair_ce(logits_a: torch.Tensor, logits_b: torch.Tensor,
             labels: torch.Tensor) -> torch.Tensor:
    ce_a = F.cross_entropy(logits_a, labels, reduction="none")
    ce_b = F.cross_entropy(logits_b, labels, reduction="none")
    return 0.5 * (ce_a + ce_b)


def loss_robot(out_a: dict, out_b: dict, class_index: int) -> torch.Tensor:
    """Loss of one robot pair (two low-quality views sharing pseudo-label)."""
    return _single_pair_loss(out_a, out_b, class_index)


def loss_cross(out_low: dict, out_high: dict, class_index: int) -> torch.Tensor:
    """Loss of one cross pair (one low-quality, one high-quality view)."""
    return _single_pair_loss(out_low, out_high, class_index)


def _single_pair_loss(out_a: dict, out_b: dict, class_index: int) -> torch.Tensor:
    p_a, z_a, logits_a = out_a["p"], out_a["z"], out_a["logits"]
    p_b, z_b, logits_b = out_b["p"], out_b["z"], out_b["logits"]
    if p_a.dim() == 1:
        p_a, z_a, logits_a = p_a[None], z_a[None], logits_a[None]
        p_b, z_b, logits_b = p_b[None], z_b[None], logits_b[None]
    labels = torch.tensor([class_index], device=p_a.device)
    cos = _pair_cosine(p_a, z_b, p_b, z_a)
    ce = _pair_ce(logits_a, logits_b, labels.expand(p_a.shape[0]))
    return (cos + ce).sum()


def loss_total(robot_a: dict | None, robot_b: dict | None,
               robot_labels: torch.Tensor | None,
               cross_low: dict | None, cross_high: dict | None,
               cross_labels: torch.Tensor | None,
               reduction: str = "sum"):
    """Batch loss: sum of per-pair robot and cross losses.

    Returns (total tensor, LossBreakdown). `reduction="mean"` divides every
    term by the pair count M + N, keeping the breakdown additive.
    """
    if reduction not in ("sum", "mean"):
        raise InvalidArgument(f"unknown reduction {reduction!r}")
    m = robot_labels.shape[0] if robot_labels is not None else 0
    n = cross_labels.shape[0] if cross_labels is not None else 0
    if m + n == 0:
        raise InvalidArgument("loss of an empty batch")
    zero = torch.zeros(())
    robot_cos = robot_ce = cross_cos = cross_ce = zero
    if m:
        robot_cos = _pair_cosine(robot_a["p"], robot_b["z"],
                                 robot_b["p"], robot_a["z"]).sum()
        robot_ce = _pair_ce(robot_a["logits"], robot_b["logits"],
                            robot_labels).sum()
    if n:
        cross_cos = _pair_cosine(cross_low["p"], cross_high["z"],
                                 cross_high["p"], cross_low["z"]).sum()
        cross_ce = _pair_ce(cross_low["logits"], cross_high["logits"],
                            cross_labels).sum()
    scale = 1.0 / (m + n) if reduction == "mean" else 1.0
    total = (robot_cos + robot_ce + cross_cos + cross_ce) * scale
    breakdown = LossBreakdown(
        total=float(total.detach()),
        robot_cosine=float(robot_cos.detach()) * scale,
        robot_ce=float(robot_ce.detach()) * scale,
        cross_cosine=float(cross_cos.detach()) * scale,
        cross_ce=float(cross_ce.detach()) * scale,
    )
    return total, breakdown


def adversarial_term(bundle: EncoderBundle, features: torch.Tensor,
                     domain_labels: torch.Tensor,
                     lam: float) -> torch.Tensor:
    """Domain-confusion term: cross-entropy of the domain head on reversed
    features. Head gradients are unscaled; backbone gradients arrive
    multiplied by -lam. Mean reduction, so chance level is ln 2."""
    if lam < 0:
        raise InvalidArgument("adversarial lambda must be >= 0")
    if bundle.domain_head is None:
        raise InvalidArgument("bundle has no domain head")
    logits = bundle.domain_head(grad_reverse(features, lam))
    return F.cross_entropy(logits, domain_labels)


# ---------------------------------------------------------------------------
# Training
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class TrainingConfig:
    learning_rate: float = 0.05
    momentum: float = 0.9
    batch_pairs: int = 64
    epochs: int = 50
    steps_per_epoch: int = 1
    shots: int = 5
    adversarial: bool = False
    adversarial_lambda: float = 1.0
    reduction: str = "sum"
    augment: AugmentParams = field(default_factory=AugmentParams)
    seed: int = 0

    def __post_init__(self):
        if self.learning_rate <= 0:
            raise InvalidArgument("learning_rate must be > 0")
        if self.epochs < 1 or self.steps_per_epoch < 1 or self.batch_pairs < 1:
            raise InvalidArgument("epochs, steps and batch_pairs must be >= 1")
        if self.shots < 1:
            raise InvalidArgument("shots must be >= 1")
        if self.reduction not in ("sum", "mean"):
            raise InvalidArgument(f"unknown reduction {self.reduction!r}")


def paper_training_config(**overrides) -> TrainingConfig:
    """Full-scale preset: batch 256 pairs, learning rate 0.07, 1000 epochs."""
    base = dict(learning_rate=0.07, batch_pairs=256, epochs=1000,
                steps_per_epoch=1, reduction="sum")
    base.update(overrides)
    return TrainingConfig(**base)


def config_fingerprint(config: TrainingConfig,
                       arch: ArchitectureConfig) -> str:
    doc = {"training": asdict(config), "arch": asdict(arch)}
    return hashlib.sha256(
        json.dumps(doc, sort_keys=True, default=str).encode()).hexdigest()


class _ImageCache:
    """Decode each crop file once; training touches the same files every step."""

    def __init__(self, db: ObjectImageDatabase):
        self._db = db
        self._cache: dict = {}

    def __call__(self, record):
        image = self._cache.get(record.path)
        if image is None:
            image = self._cache[record.path] = self._db.load_image(record)
        return image


def _materialize(batch: PairBatch, params: AugmentParams,
                 rng: np.random.Generator):
    """Augment every view once and stack tensors per pair side."""
    def side(pairs, pick):
        return [augment_image(pick(p), params, rng) for p in pairs]

    robot_a = side(batch.robot_pairs, lambda p: p.view_a)
    robot_b = side(batch.robot_pairs, lambda p: p.view_b)
    cross_l = side(batch.cross_pairs, lambda p: p.view_a)
    cross_h = side(batch.cross_pairs, lambda p: p.view_b)
    return robot_a, robot_b, cross_l, cross_h


def train(db: ObjectImageDatabase, config: TrainingConfig,
          arch: ArchitectureConfig | None = None):
    """Fine-tune a bundle on the database; returns (bundle, log rows).

    Each step: sample a stratified pair batch, augment every view, forward
    both sides, apply the summed pair loss (plus the adversarial term when
    enabled), and take one SGD step. The log holds one row per epoch with the
    loss breakdown summed over its steps.
    """
    arch = arch or ArchitectureConfig()
    if config.adversarial and not arch.with_domain_head:
        arch = replace(arch, with_domain_head=True)
    shot_db = db.with_shots(config.shots)
    bundle = EncoderBundle(arch, shot_db.instance_ids, seed=config.seed)
    bundle.train()
    optimizer = torch.optim.SGD(bundle.parameters(), lr=config.learning_rate,
                                momentum=config.momentum)
    loader = _ImageCache(shot_db)
    master = np.random.default_rng(config.seed)
    log = []
    for epoch in range(config.epochs):
        sums = {"robot_cosine": 0.0, "robot_ce": 0.0, "cross_cosine": 0.0,
                "cross_ce": 0.0, "adversarial": 0.0, "total": 0.0}
        for step in range(config.steps_per_epoch):
            batch = build_pairs(shot_db, config.batch_pairs,
                                int(master.integers(2 ** 63)), loader=loader)
            aug_rng = np.random.default_rng(int(master.integers(2 ** 63)))
            robot_a, robot_b, cross_l, cross_h = _materialize(
                batch, config.augment, aug_rng)

            views, slices, start = [], [], 0
            for group in (robot_a, robot_b, cross_l, cross_h):
                views.extend(group)
                slices.append(slice(start, start + len(group)))
                start += len(group)
            out = bundle(images_to_tensor(views))
            out_ra, out_rb, out_cl, out_ch = (
                {key: value[s] for key, value in out.items()} for s in slices)

            robot_labels = torch.tensor(
                [bundle.class_index(p.label) for p in batch.robot_pairs],
                dtype=torch.long)
            cross_labels = torch.tensor(
                [bundle.class_index(p.label) for p in batch.cross_pairs],
                dtype=torch.long)
            total, breakdown = loss_total(
                out_ra if batch.m else None, out_rb if batch.m else None,
                robot_labels if batch.m else None,
                out_cl if batch.n else None, out_ch if batch.n else None,
                cross_labels if batch.n else None,
                reduction=config.reduction)

            adv_value = 0.0
            if config.adversarial:
                # concatenation order is robot_a, robot_b, cross_low,
                # cross_high; low-quality views are domain 0, high are 1
                domain_labels = torch.tensor(
                    [0] * (batch.m * 2 + batch.n) + [1] * batch.n,
                    dtype=torch.long)
                adv = adversarial_term(bundle, out["f"], domain_labels,
                                       config.adversarial_lambda)
                total = total + adv
                adv_value = float(adv.detach())

            if not torch.isfinite(total):
                raise NumericError(
                    f"non-finite loss at epoch {epoch}, step {step}")
            optimizer.zero_grad()
            total.backward()
            optimizer.step()

            sums["robot_cosine"] += breakdown.robot_cosine
            sums["robot_ce"] += breakdown.robot_ce
            sums["cross_cosine"] += breakdown.cross_cosine
            sums["cross_ce"] += breakdown.cross_ce
            sums["adversarial"] += adv_value
            sums["total"] += float(total.detach())
        log.append({"epoch": epoch, **sums})
    bundle.eval()
    return bundle, log


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

def save_bundle(bundle: EncoderBundle, path, config: TrainingConfig | None = None,
                db_digest: str | None = None) -> None:
    fingerprint = (config_fingerprint(config, bundle.arch)
                   if config is not None else None)
    torch.save({
        "format_version": _CHECKPOINT_FORMAT_VERSION,
        "arch": asdict(bundle.arch),
        "class_ids": list(bundle.class_ids),
        "state": bundle.state_dict(),
        "config_fingerprint": fingerprint,
        "db_digest": db_digest,
    }, path)


def load_bundle(path):
    """Returns (bundle in eval mode, checkpoint metadata)."""
    doc = torch.load(path, map_location="cpu", weights_only=False)
    version = doc.get("format_version")
    if version != _CHECKPOINT_FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    arch_doc = dict(doc["arch"])
    for key in ("input_size", "feature_dim", "proj_dim"):
        arch_doc[key] = int(arch_doc[key])
    arch = ArchitectureConfig(**arch_doc)
    bundle = EncoderBundle(arch, doc["class_ids"])
    bundle.load_state_dict(doc["state"])
    bundle.eval()
    meta = {"config_fingerprint": doc.get("config_fingerprint"),
            "db_digest": doc.get("db_digest")}
    return bundle, meta
