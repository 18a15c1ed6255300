"""Retrieval evaluation: SR / MRR / MR metrics, multi-condition benchmarks,
the few-shot ablation, latent-space projections, and report rendering.

SR is top-1 accuracy, MRR the mean reciprocal rank, and MR is defined as
1 / MRR (the source convention), which generally differs from the empirical
mean of ranks — the latter is reported as a separate informational column.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, replace as dc_replace
from pathlib import Path

import matplotlib
matplotlib.use("Agg")
import matplotlib.pyplot as plt
import numpy as np

from .database import ObjectImageDatabase
from .errors import (GoalUnreachable, InvalidArgument, NotFound, PipelineError)
from .learning import EncoderBundle, TrainingConfig, load_bundle, train
from .mapping import VoxelSemanticMap, resolve_nav_goal
from .retrieval import build_embedding_index, embed, rank_instances


@dataclass(frozen=True)
class TrialResult:
    query: str
    instance_id: int  # ground truth
    k: int            # 1-based rank of the ground truth
    s: int            # 1 iff k == 1

    def __post_init__(self):
        if self.k < 1:
            raise InvalidArgument("rank must be >= 1")
        if self.s != (1 if self.k == 1 else 0):
            raise InvalidArgument("s must be 1 exactly when k == 1")


@dataclass(frozen=True)
class EvalReport:
    label: str
    n: int
    sr: float
    mrr: float
    mr: float               # 1 / MRR
    mean_rank: float        # empirical mean of ranks (informational)
    trials: tuple = ()
    alignment: float | None = None  # mean cross-domain same-instance cosine
    notes: tuple = ()
    error: str | None = None

    def __post_init__(self):
        if self.error is not None:
            return
        if self.n != len(self.trials):
            raise InvalidArgument("trial count disagrees with N")
        if not 0 <= self.sr <= self.mrr <= 1:
            raise InvalidArgument("metrics must satisfy 0 <= SR <= MRR <= 1")
        if abs(self.mr * self.mrr - 1.0) > 1e-9:
            raise InvalidArgument("MR must equal 1 / MRR")


def failed_report(label: str, error: str) -> EvalReport:
    return EvalReport(label, 0, 0.0, 0.0, 0.0, 0.0, error=error)


@dataclass(frozen=True)
class Query:
    image: np.ndarray
    instance_id: int
    ref: str = ""


def compute_metrics(trials, label: str = "", alignment: float | None = None,
                    notes=()) -> EvalReport:
    """SR = mean(s), MRR = mean(1/k), MR = 1/MRR over the trial list."""
    trials = tuple(trials)
    if not trials:
        raise InvalidArgument("cannot compute metrics over zero trials")
    ks = np.array([t.k for t in trials], dtype=np.float64)
    if (ks < 1).any():
        raise InvalidArgument("all ranks must be >= 1")
    sr = float(np.mean([t.s for t in trials]))
    mrr = float(np.mean(1.0 / ks))
    return EvalReport(label=label, n=len(trials), sr=sr, mrr=mrr,
                      mr=1.0 / mrr, mean_rank=float(ks.mean()), trials=trials,
                      alignment=alignment, notes=tuple(notes))


# ---------------------------------------------------------------------------
# Benchmark and ablation runners
# ---------------------------------------------------------------------------

def evaluate_bundle(bundle: EncoderBundle, queries, db: ObjectImageDatabase,
                    label: str = "", vmap: VoxelSemanticMap | None = None,
                    aggregate: str = "max") -> EvalReport:
    """Rank every query against the database's low-quality crops.

    Queries whose ground-truth id is absent from the database are skipped
    and listed in the report notes. With a map attached, each trial's top-1
    instance is also resolved to a goal and unreachable ones are counted.
    """
    index = build_embedding_index(bundle, db)
    trials, notes = [], []
    unreachable = 0
    for i, query in enumerate(queries):
        if query.instance_id not in index:
            notes.append(f"skipped query {query.ref or i}: "
                         f"unknown instance {query.instance_id}")
            continue
        (emb,) = embed(bundle, [query.image],
                       sources=[query.ref or f"query-{i}"])
        result = rank_instances(emb, index, gt_instance=query.instance_id)
        trials.append(TrialResult(result.query, query.instance_id,
                                  result.k, 1 if result.k == 1 else 0))
        if vmap is not None:
            try:
                resolve_nav_goal(vmap, result.top_instance)
            except (GoalUnreachable, NotFound):
                unreachable += 1
    if vmap is not None and unreachable:
        notes.append(f"{unreachable} top-1 goals unreachable")
    alignment = cross_domain_alignment(bundle, db)
    return compute_metrics(trials, label=label, alignment=alignment,
                           notes=notes)


def run_benchmark(conditions, queries, db: ObjectImageDatabase,
                  vmap: VoxelSemanticMap | None = None) -> list:
    """One report per condition: {label, bundle (or checkpoint path)}.

    A condition whose bundle fails to load yields a failed report; the
    remaining conditions are unaffected.
    """
    reports = []
    for condition in conditions:
        label = condition["label"]
        try:
            bundle = condition["bundle"]
            if not isinstance(bundle, EncoderBundle):
                bundle, _ = load_bundle(bundle)
            reports.append(evaluate_bundle(bundle, queries, db, label=label,
                                           vmap=vmap))
        except (PipelineError, OSError) as exc:
            reports.append(failed_report(label, str(exc)))
    return reports


_SHOT_LABELS = {1: "One-shot", 3: "Three-shot", 5: "Five-shot"}


def few_shot_ablation(db: ObjectImageDatabase, shots_list, config: TrainingConfig,
                      queries, arch=None,
                      vmap: VoxelSemanticMap | None = None) -> list:
    """Train and evaluate once per shots value (high-quality images per
    instance available to fine-tuning); returns one report per value."""
    shots_list = list(shots_list)
    if not shots_list or min(shots_list) < 1:
        raise InvalidArgument("shots values must be >= 1")
    needed = max(shots_list)
    for instance_id in db.instance_ids:
        have = len(db.instances[instance_id].high())
        if have < needed:
            raise InvalidArgument(
                f"instance {instance_id} has {have} high-quality images, "
                f"ablation needs {needed}")
    reports = []
    for shots in shots_list:
        bundle, _ = train(db, dc_replace(config, shots=shots), arch=arch)
        label = _SHOT_LABELS.get(shots, f"{shots}-shot")
        reports.append(evaluate_bundle(bundle, queries, db, label=label,
                                       vmap=vmap))
    return reports


def cross_domain_alignment(bundle: EncoderBundle,
                           db: ObjectImageDatabase) -> float | None:
    """Mean cosine between each high-quality embedding and the embeddings of
    same-instance low-quality crops; None when no instance has both domains."""
    low_index = build_embedding_index(bundle, db, domain="low")
    high_index = build_embedding_index(bundle, db, domain="high")
    sims = []
    for instance_id, highs in high_index.items():
        lows = low_index.get(instance_id)
        if not lows:
            continue
        low_mat = np.stack([e.values for e in lows])
        low_mat = low_mat / np.linalg.norm(low_mat, axis=1, keepdims=True)
        for e in highs:
            v = e.values / np.linalg.norm(e.values)
            sims.extend(low_mat @ v)
    return float(np.mean(sims)) if sims else None


# ---------------------------------------------------------------------------
# Latent projection
# ---------------------------------------------------------------------------

def project_latent(vectors: np.ndarray) -> np.ndarray:
    """Deterministic 2-component principal projection of row vectors."""
    vectors = np.asarray(vectors, dtype=np.float64)
    if vectors.ndim != 2 or vectors.shape[0] < 2:
        raise InvalidArgument("latent projection needs >= 2 embeddings")
    centered = vectors - vectors.mean(axis=0)
    _, _, vt = np.linalg.svd(centered, full_matrices=False)
    components = vt[:2]
    if components.shape[0] < 2:  # rank-1 data: pad an orthogonal axis
        pad = np.zeros((2 - components.shape[0], vectors.shape[1]))
        components = np.vstack([components, pad])
    # fix the sign convention so the projection is unique
    for row in components:
        pivot = np.argmax(np.abs(row))
        if row[pivot] < 0:
            row *= -1
    return centered @ components.T


def export_latent_projection(vectors, instance_ids, domains, path) -> np.ndarray:
    """Write `x,y,instance_id,domain` rows; returns the (N, 2) points."""
    points = project_latent(np.asarray(vectors))
    instance_ids = list(instance_ids)
    domains = list(domains)
    if len(instance_ids) != len(points) or len(domains) != len(points):
        raise InvalidArgument("labels must match the number of embeddings")
    lines = ["x,y,instance_id,domain"]
    for (x, y), instance_id, domain in zip(points, instance_ids, domains):
        lines.append(f"{x:.8f},{y:.8f},{instance_id},{domain}")
    Path(path).write_text("\n".join(lines) + "\n")
    return points


# ---------------------------------------------------------------------------
# Report rendering
# ---------------------------------------------------------------------------

def format_metrics_row(label: str, sr: float, mrr: float, mr: float,
                       style: str = "benchmark") -> str:
    if style == "benchmark":
        return f"{label} | SR {sr:.3f} | MRR {mrr:.3f} | MR {mr:.2f}"
    if style == "ablation":
        return f"{label} | {sr:.3f} | {mrr:.3f} | {mr:.2f}"
    raise InvalidArgument(f"unknown row style {style!r}")


def format_report_table(reports) -> str:
    """Delimited comparison table with the empirical mean rank as an extra
    informational column and failure/notes lines in the footer."""
    lines = ["condition | SR | MRR | MR | mean rank | N"]
    footer = []
    for report in reports:
        if report.error is not None:
            lines.append(f"{report.label} | failed | - | - | - | -")
            footer.append(f"# {report.label}: {report.error}")
            continue
        lines.append(f"{report.label} | {report.sr:.3f} | {report.mrr:.3f} | "
                     f"{report.mr:.2f} | {report.mean_rank:.2f} | {report.n}")
        for note in report.notes:
            footer.append(f"# {report.label}: {note}")
    return "\n".join(lines + footer) + "\n"


def save_reports(reports, table_path, json_path) -> None:
    Path(table_path).write_text(format_report_table(reports))
    doc = []
    for report in reports:
        entry = {"label": report.label, "error": report.error}
        if report.error is None:
            entry.update(n=report.n, sr=report.sr, mrr=report.mrr,
                         mr=report.mr, mean_rank=report.mean_rank,
                         alignment=report.alignment, notes=list(report.notes),
                         trials=[{"query": t.query, "gt": t.instance_id,
                                  "k": t.k, "s": t.s} for t in report.trials])
        doc.append(entry)
    Path(json_path).write_text(json.dumps(doc, indent=2) + "\n")


def plot_benchmark(reports, path) -> None:
    """Grouped SR/MRR bars per condition."""
    ok = [r for r in reports if r.error is None]
    if not ok:
        raise InvalidArgument("no successful conditions to plot")
    labels = [r.label for r in ok]
    x = np.arange(len(ok))
    fig, ax = plt.subplots(figsize=(1.6 * len(ok) + 2, 3.2))
    ax.bar(x - 0.18, [r.sr for r in ok], width=0.36, label="SR")
    ax.bar(x + 0.18, [r.mrr for r in ok], width=0.36, label="MRR")
    ax.set_xticks(x, labels, rotation=20, ha="right")
    ax.set_ylim(0, 1.05)
    ax.set_ylabel("score")
    ax.legend(frameon=False)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)


def plot_latent(points: np.ndarray, instance_ids, domains, path) -> None:
    """Scatter of projected embeddings: color = instance, marker = domain."""
    points = np.asarray(points)
    instance_ids = np.asarray(list(instance_ids))
    domains = np.asarray(list(domains))
    fig, ax = plt.subplots(figsize=(4.8, 4.2))
    cmap = plt.colormaps["tab20"]
    unique_ids = sorted(set(int(i) for i in instance_ids))
    for idx, instance_id in enumerate(unique_ids):
        color = cmap(idx % 20)
        for domain, marker in (("low", "o"), ("high", "^")):
            sel = (instance_ids == instance_id) & (domains == domain)
            if sel.any():
                ax.scatter(points[sel, 0], points[sel, 1], s=18, marker=marker,
                           color=color, edgecolors="none",
                           label=f"{instance_id}" if domain == "low" else None)
    ax.set_xlabel("component 1")
    ax.set_ylabel("component 2")
    if len(unique_ids) <= 12:
        ax.legend(frameon=False, fontsize=7, title="instance", ncol=2)
    fig.tight_layout()
    fig.savefig(path, dpi=150)
    plt.close(fig)
