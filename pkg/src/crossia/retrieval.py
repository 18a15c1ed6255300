"""Instance retrieval and goal resolution.

Query and database images are embedded with the fine-tuned backbone; database
instances are ranked by the maximum cosine similarity over their stored crops
(normalization happens inside the similarity, so embeddings are kept raw).
The top-ranked instance resolves to a navigation goal near its map centroid.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass

import cv2
import numpy as np
import torch

from .database import ObjectImageDatabase
from .errors import FormatError, InvalidArgument, NumericError
from .learning import EncoderBundle, images_to_tensor
from .mapping import NavGoal, VoxelSemanticMap, resolve_nav_goal

_INDEX_FORMAT_VERSION = 1


@dataclass(frozen=True)
class EmbeddingVector:
    values: np.ndarray  # (D_f,)
    source: str = ""

    def __post_init__(self):
        arr = np.asarray(self.values, dtype=np.float64)
        if arr.ndim != 1:
            raise InvalidArgument("embedding must be a vector")
        if not np.all(np.isfinite(arr)):
            raise NumericError(f"non-finite embedding for {self.source!r}")
        if np.linalg.norm(arr) <= 0:
            raise NumericError(f"zero-norm embedding for {self.source!r}")
        object.__setattr__(self, "values", arr)


@dataclass(frozen=True)
class RankingResult:
    query: str
    ranking: tuple  # ((instance_id, score), ...) scores non-increasing
    gt_instance: int | None = None
    k: int | None = None  # 1-based rank of the ground truth, when known

    def __post_init__(self):
        scores = [s for _, s in self.ranking]
        if any(a < b for a, b in zip(scores, scores[1:])):
            raise InvalidArgument("ranking scores must be non-increasing")
        ids = [i for i, _ in self.ranking]
        if len(set(ids)) != len(ids):
            raise InvalidArgument("ranking ids must be unique")

    @property
    def top_instance(self) -> int:
        return self.ranking[0][0]


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Dot product of L2-normalized vectors."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na <= 0 or nb <= 0:
        raise NumericError("zero-norm vector in cosine similarity")
    return float(a @ b / (na * nb))


def embed(bundle: EncoderBundle, images, sources=None) -> list:
    """Backbone features of `images` (uint8 RGB, any size; resized to the
    encoder input resolution). Deterministic in eval mode."""
    images = list(images)
    if not images:
        return []
    sources = list(sources) if sources is not None else [""] * len(images)
    size = bundle.arch.input_size
    resized = [cv2.resize(im, (size, size), interpolation=cv2.INTER_LINEAR)
               for im in images]
    bundle.eval()
    with torch.no_grad():
        feats = bundle.features(images_to_tensor(resized)).numpy()
    return [EmbeddingVector(f, source=s) for f, s in zip(feats, sources)]


def build_embedding_index(bundle: EncoderBundle, db: ObjectImageDatabase,
                          domain: str = "low") -> dict:
    """instance_id -> list of EmbeddingVector over the database's crops of
    one domain (retrieval searches the robot-collected low-quality crops)."""
    index: dict = {}
    for instance_id in db.instance_ids:
        crops = [c for c in db.instances[instance_id].crops
                 if domain is None or c.domain == domain]
        if not crops:
            continue
        images = [db.load_image(c) for c in crops]
        index[instance_id] = embed(bundle, images,
                                   sources=[c.path for c in crops])
    return index


def rank_instances(query: EmbeddingVector, index: dict,
                   gt_instance: int | None = None,
                   aggregate: str = "max") -> RankingResult:
    """Rank instances by aggregated crop similarity, descending; ties break
    toward the lower instance id."""
    if not index:
        raise InvalidArgument("cannot rank against an empty index")
    if aggregate not in ("max", "mean"):
        raise InvalidArgument(f"unknown aggregate {aggregate!r}")
    scored = []
    for instance_id in sorted(index):
        sims = [cosine_similarity(query.values, e.values)
                for e in index[instance_id]]
        score = max(sims) if aggregate == "max" else float(np.mean(sims))
        scored.append((instance_id, score))
    scored.sort(key=lambda pair: (-pair[1], pair[0]))
    k = None
    if gt_instance is not None and any(i == gt_instance for i, _ in scored):
        k = 1 + next(idx for idx, (i, _) in enumerate(scored)
                     if i == gt_instance)
    return RankingResult(query.source, tuple(scored), gt_instance, k)


def locate(query_image: np.ndarray, bundle: EncoderBundle,
           db: ObjectImageDatabase, vmap: VoxelSemanticMap,
           index: dict | None = None, max_radius: float = 1.0,
           floor_height: float = 0.0):
    """Embed the query, rank instances, resolve the top match to a goal.

    Returns (RankingResult, NavGoal); goal-unreachable propagates.
    """
    if index is None:
        index = build_embedding_index(bundle, db)
    (query_emb,) = embed(bundle, [query_image], sources=["query"])
    ranking = rank_instances(query_emb, index)
    goal = resolve_nav_goal(vmap, ranking.top_instance, max_radius=max_radius,
                            floor_height=floor_height)
    return ranking, goal


# ---------------------------------------------------------------------------
# Embedding cache
# ---------------------------------------------------------------------------

def db_digest(db: ObjectImageDatabase) -> str:
    """Stable digest over the database's crop records (paths + image digests)."""
    acc = hashlib.sha256()
    for crop in db.crops():
        acc.update(f"{crop.instance_id}:{crop.path}:{crop.domain}:"
                   f"{crop.digest}\n".encode())
    return acc.hexdigest()


def save_embedding_index(index: dict, path, bundle_fingerprint: str = "",
                         database_digest: str = "") -> None:
    ids, vectors, sources = [], [], []
    for instance_id in sorted(index):
        for e in index[instance_id]:
            ids.append(instance_id)
            vectors.append(e.values)
            sources.append(e.source)
    np.savez_compressed(
        path,
        format_version=np.int64(_INDEX_FORMAT_VERSION),
        bundle_fingerprint=np.str_(bundle_fingerprint),
        db_digest=np.str_(database_digest),
        instance_ids=np.asarray(ids, dtype=np.int64),
        vectors=np.asarray(vectors, dtype=np.float64),
        sources=np.asarray(sources, dtype=object),
    )


def load_embedding_index(path, expect_fingerprint: str | None = None,
                         expect_digest: str | None = None) -> dict:
    with np.load(path, allow_pickle=True) as data:
        version = int(data["format_version"])
        if version != _INDEX_FORMAT_VERSION:
            raise FormatError(f"{path}: unsupported index version {version}")
        if expect_fingerprint is not None and \
                str(data["bundle_fingerprint"]) != expect_fingerprint:
            raise FormatError(f"{path}: embedding index built by another bundle")
        if expect_digest is not None and str(data["db_digest"]) != expect_digest:
            raise FormatError(f"{path}: embedding index built from another database")
        index: dict = {}
        for instance_id, vector, source in zip(data["instance_ids"],
                                               data["vectors"], data["sources"]):
            index.setdefault(int(instance_id), []).append(
                EmbeddingVector(vector, source=str(source)))
    return index
