"""Unlabeled-pool curation: entropy scoring, clustering, quotas, selection.

The pool is scored by per-pixel average entropy, ranked ascending, and
admitted greedily under per-cluster quotas. Clusters come from K-means
over labeled features; unlabeled patches attach to the prototype with the
highest cosine similarity. Quotas split the budget proportionally to the
labeled mass of each cluster and are rounded by largest remainder so they
sum to the budget exactly. A patch whose cluster is full is skipped for
good, never rerouted.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import ConfigError, IngestionError
from .io import read_manifest, load_tensor, write_manifest
from .parallel import det_map
from .rng import stream

PROB_SUM_TOL = 1e-6


@dataclass
class ScoredPatch:
    patch_id: str
    entropy: float
    cluster: int = -1


@dataclass
class ClusterModel:
    prototypes: np.ndarray  # M x d, rows unit-normalized
    labeled_counts: np.ndarray  # M, sums to total_labeled
    total_labeled: int


@dataclass
class QuotaPlan:
    quotas: np.ndarray  # M nonnegative ints summing to budget
    budget: int


def validate_prob_map(probs: np.ndarray, patch_id: str = "?") -> np.ndarray:
    if probs.ndim != 3:
        raise IngestionError(f"{patch_id}: probability map must be H x W x K, got {probs.shape}")
    if probs.min() < 0 or probs.max() > 1 + PROB_SUM_TOL:
        raise IngestionError(f"{patch_id}: probabilities outside [0, 1]")
    sums = probs.sum(axis=2)
    worst = float(np.max(np.abs(sums - 1.0)))
    if worst > PROB_SUM_TOL:
        raise IngestionError(f"{patch_id}: rows deviate from sum 1 by {worst:.2e}")
    return probs


def average_entropy(probs: np.ndarray) -> float:
    """Mean over pixels of -sum_k p log p, with 0 log 0 taken as 0."""
    h, w, _ = probs.shape
    p = probs.reshape(-1, probs.shape[2])
    terms = np.zeros_like(p)
    nz = p > 0
    terms[nz] = p[nz] * np.log(p[nz])
    return float(-terms.sum() / (h * w))


def rank_by_entropy(patches) -> list:
    """Ascending entropy; ties break on patch_id so order is total."""
    return sorted(patches, key=lambda sp: (sp.entropy, sp.patch_id))


# ---------------------------------------------------------------------------
# clustering


def _weighted_pick(weights: np.ndarray, rng: np.random.Generator) -> int:
    """Inverse-CDF draw; stable under duplicated rows of the sorted input."""
    cum = np.cumsum(weights)
    return int(np.searchsorted(cum, rng.random() * cum[-1], side="right"))


def _kmeans_pp_init(features: np.ndarray, m: int, rng: np.random.Generator) -> np.ndarray:
    n = features.shape[0]
    centers = np.empty((m, features.shape[1]))
    centers[0] = features[min(_weighted_pick(np.ones(n), rng), n - 1)]
    d2 = ((features - centers[0]) ** 2).sum(axis=1)
    for j in range(1, m):
        if d2.sum() <= 0:
            idx = min(_weighted_pick(np.ones(n), rng), n - 1)
        else:
            idx = min(_weighted_pick(d2, rng), n - 1)
        centers[j] = features[idx]
        d2 = np.minimum(d2, ((features - centers[j]) ** 2).sum(axis=1))
    return centers


def _assign_euclidean(features: np.ndarray, centers: np.ndarray) -> np.ndarray:
    d2 = ((features[:, None, :] - centers[None, :, :]) ** 2).sum(axis=2)
    return np.argmin(d2, axis=1)


def fit_clusters(features: np.ndarray, m: int, seed: int,
                 max_iter: int = 100, tol: float = 1e-6) -> ClusterModel:
    """Lloyd's iterations with k-means++ seeding; prototypes are the final
    centroids unit-normalized so cosine assignment matches the fit.

    Rows are processed in canonical (lexicographic) order and the seeding
    samples by inverse CDF, so duplicating every sample reproduces the
    prototypes exactly and doubles the counts.
    """
    features = np.asarray(features, dtype=np.float64)
    n = features.shape[0]
    if n < m:
        raise ConfigError(f"need at least {m} labeled features, got {n}")
    features = features[np.lexsort(features.T[::-1])]
    rng = stream(seed, "kmeans")
    centers = _kmeans_pp_init(features, m, rng)
    assign = _assign_euclidean(features, centers)
    for _ in range(max_iter):
        new_centers = centers.copy()
        for j in range(m):
            members = features[assign == j]
            if len(members):
                new_centers[j] = members.mean(axis=0)
            else:
                # adopt the point farthest from its current centroid
                d2 = ((features - centers[assign]) ** 2).sum(axis=1)
                far = int(np.argmax(d2))
                new_centers[j] = features[far]
        shift = float(np.max(np.sqrt(((new_centers - centers) ** 2).sum(axis=1))))
        centers = new_centers
        assign = _assign_euclidean(features, centers)
        if shift < tol:
            break
    counts = np.bincount(assign, minlength=m)
    norms = np.linalg.norm(centers, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ConfigError("degenerate zero-norm centroid; features are all zero")
    return ClusterModel(prototypes=centers / norms, labeled_counts=counts, total_labeled=n)


def assign_cluster(feature: np.ndarray, model: ClusterModel) -> int:
    """Highest cosine similarity to the prototypes; ties take the lowest index."""
    feature = np.asarray(feature, dtype=np.float64)
    norm = float(np.linalg.norm(feature))
    if norm == 0:
        raise ConfigError("cannot assign a zero-norm feature by cosine similarity")
    sims = model.prototypes @ (feature / norm)
    return int(np.argmax(sims))


def allocate_quotas(model: ClusterModel, budget: int) -> QuotaPlan:
    """Largest-remainder rounding of budget * N_m / B_l; ties favor lower index."""
    if budget < 0:
        raise ConfigError("budget must be nonnegative")
    if model.total_labeled <= 0:
        raise ConfigError("quota allocation requires labeled samples in the cluster model")
    real = budget * model.labeled_counts / model.total_labeled
    floors = np.floor(real).astype(np.int64)
    leftover = int(budget - floors.sum())
    remainders = real - floors
    order = sorted(range(len(real)), key=lambda j: (-remainders[j], j))
    quotas = floors.copy()
    for j in order[:leftover]:
        quotas[j] += 1
    return QuotaPlan(quotas=quotas, budget=int(budget))


def select(ranked, plan: QuotaPlan) -> list:
    """Single ascending-entropy pass; a full cluster excludes its patches."""
    remaining = plan.quotas.copy()
    chosen = []
    for sp in ranked:
        if sp.cluster < 0 or sp.cluster >= len(remaining):
            raise ConfigError(f"patch {sp.patch_id} has no cluster assignment")
        if remaining[sp.cluster] > 0:
            remaining[sp.cluster] -= 1
            chosen.append(sp.patch_id)
    return chosen


# ---------------------------------------------------------------------------
# end-to-end


def _load_feature(infer_dir: Path, patch_id: str) -> np.ndarray:
    path = infer_dir / f"{patch_id}.feat.bin"
    if not path.exists():
        raise IngestionError(f"missing feature file for patch {patch_id}: {path}")
    return np.asarray(load_tensor(path), dtype=np.float64)


def curate(labeled_manifest, unlabeled_manifests, infer_dir, out_dir,
           clusters: int, budget: int, seed: int, method: str = "entropy",
           workers: int = 1) -> dict:
    """Score, cluster, and select the unlabeled pool; write manifest + report.

    `method="random"` draws a uniform sample instead (the ablation baseline);
    the report's per-dataset tallies support either path.
    """
    if method not in ("entropy", "random"):
        raise ConfigError(f"unknown curation method {method!r}")
    infer_dir = Path(infer_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    labeled = [r for r in read_manifest(labeled_manifest) if r.split == "train"]
    pool = []
    source = {}
    for path in unlabeled_manifests:
        for rec in read_manifest(path):
            pool.append(rec)
            if rec.id in source:
                raise IngestionError(f"duplicate patch id across unlabeled manifests: {rec.id}")
            source[rec.id] = Path(path)
    pool.sort(key=lambda r: r.id)
    by_id = {r.id: r for r in pool}

    report: dict = {"method": method, "budget": int(budget), "pool": len(pool)}

    if method == "random" or not pool:
        rng = stream(seed, "curate-random")
        take = min(budget, len(pool))
        ids = [pool[i].id for i in rng.permutation(len(pool))[:take]] if take else []
        selected = sorted(ids)
        scored = None
    else:
        def score(rec):
            path = infer_dir / f"{rec.id}.probs.bin"
            if not path.exists():
                raise IngestionError(f"missing probability map for patch {rec.id}: {path}")
            probs = validate_prob_map(np.asarray(load_tensor(path), dtype=np.float64), rec.id)
            return ScoredPatch(rec.id, average_entropy(probs))

        scored = det_map(score, pool, workers)
        lab_feats = np.stack(det_map(lambda r: _load_feature(infer_dir, r.id), labeled, workers))
        model = fit_clusters(lab_feats, clusters, seed)

        def attach(sp):
            sp.cluster = assign_cluster(_load_feature(infer_dir, sp.patch_id), model)
            return sp

        scored = det_map(attach, scored, workers)
        plan = allocate_quotas(model, budget)
        ranked = rank_by_entropy(scored)
        selected = select(ranked, plan)

        pool_counts = np.bincount([sp.cluster for sp in scored], minlength=clusters)
        sel_set = set(selected)
        sel_counts = np.bincount(
            [sp.cluster for sp in scored if sp.patch_id in sel_set], minlength=clusters)
        entropies = np.array([sp.entropy for sp in scored])
        report["clusters"] = {
            "labeled_counts": model.labeled_counts.tolist(),
            "pool_counts": pool_counts.tolist(),
            "quotas": plan.quotas.tolist(),
            "selected_counts": sel_counts.tolist(),
        }
        report["entropy_quantiles"] = {
            q: float(np.quantile(entropies, float(q))) for q in ("0.0", "0.25", "0.5", "0.75", "1.0")
        } if len(entropies) else {}

    sel_set = set(selected)
    report["selected"] = len(selected)
    report["selected_fraction"] = len(selected) / len(pool) if pool else 0.0
    by_dataset: dict = {}
    for rec in pool:
        d = by_dataset.setdefault(rec.dataset, {"pool": 0, "selected": 0})
        d["pool"] += 1
        d["selected"] += rec.id in sel_set
    report["by_dataset"] = by_dataset

    if method == "entropy" and scored is not None:
        order = {pid: i for i, pid in enumerate(selected)}
        out_records = sorted((by_id[pid] for pid in selected), key=lambda r: order[r.id])
    else:
        out_records = [by_id[pid] for pid in selected]
    # rewrite image paths relative to the curated manifest location
    rebased = []
    for rec in out_records:
        image = _relative_to(out_dir / "curated.jsonl", source[rec.id].parent / rec.image)
        rebased.append(type(rec)(rec.id, image, None, rec.dataset, rec.split))
    write_manifest(out_dir / "curated.jsonl", rebased)
    (out_dir / "report.json").write_text(json.dumps(report, sort_keys=True, indent=2) + "\n",
                                         encoding="utf-8")
    return report


def _relative_to(manifest_path: Path, target: Path) -> str:
    import os

    return os.path.relpath(Path(target).resolve(), Path(manifest_path).resolve().parent)
