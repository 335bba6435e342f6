"""Topic list reduction: frequency stats, thresholding, clustering, review.

Three reduction routes are offered: keep topics above a share threshold,
cluster topic embeddings and keep one representative per cluster, or ask the
teacher to prune the list (non-deterministic, flagged in run metadata).
"""
from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .errors import (
    DimensionMismatchError,
    EmptyReductionError,
    KTooLargeError,
    MissingEmbeddingError,
)
from .teacher import (
    TOPIC_DISCOVERY_FORMAT,
    LabeledSentence,
    TeacherEndpoint,
    parse_topic_list,
)

logger = logging.getLogger(__name__)

KMEANS_MAX_ITERS = 300


@dataclass(frozen=True)
class TopicStats:
    """Per-topic frequency over a labeled sample."""

    topic: str
    n_k: int
    share: float


@dataclass
class KMeansResult:
    labels: np.ndarray
    centroids: np.ndarray
    objective: float
    iterations: int
    objective_history: list[float] = field(default_factory=list)


@dataclass
class TopicClusters:
    k: int
    assignments: dict[str, int]
    representatives: dict[int, str]
    objective: float


def compute_topic_stats(labels: Iterable[LabeledSentence]) -> list[TopicStats]:
    """Count topic occurrences; output sorted by descending n_k, then name."""
    counts: dict[str, int] = {}
    for lab in labels:
        if lab.topic is not None:
            counts[lab.topic] = counts.get(lab.topic, 0) + 1
    total = sum(counts.values())
    stats = [
        TopicStats(topic=t, n_k=n, share=n / total if total else 0.0)
        for t, n in counts.items()
    ]
    stats.sort(key=lambda s: (-s.n_k, s.topic))
    return stats


def reduce_by_threshold(
    stats: Sequence[TopicStats], threshold: float, mode: str = "per_topic"
) -> list[str]:
    """Keep frequent topics.

    ``per_topic`` keeps every topic whose own share is at least the
    threshold. ``cumulative`` keeps the smallest frequency-ordered prefix
    whose combined share reaches the threshold.
    """
    ordered = sorted(stats, key=lambda s: (-s.n_k, s.topic))
    if mode == "per_topic":
        kept = [s.topic for s in ordered if s.share >= threshold]
    elif mode == "cumulative":
        kept = []
        running = 0.0
        for s in ordered:
            if running >= threshold:
                break
            kept.append(s.topic)
            running += s.share
        if running < threshold:
            kept = []
    else:
        raise ValueError(f"unknown reduction mode {mode!r}")
    if not kept:
        raise EmptyReductionError(
            f"no topic survived threshold {threshold} in mode {mode!r}"
        )
    return kept


def _squared_distances(x: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    diff = x[:, None, :] - centroids[None, :, :]
    return np.einsum("nkd,nkd->nk", diff, diff)


def _plus_plus_seed(x: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = x.shape[0]
    centroids = np.empty((k, x.shape[1]), dtype=x.dtype)
    centroids[0] = x[rng.integers(n)]
    d2 = np.einsum("nd,nd->n", x - centroids[0], x - centroids[0])
    for j in range(1, k):
        total = d2.sum()
        if total <= 0.0:
            idx = int(rng.integers(n))  # all points coincide with a centroid
        else:
            idx = int(rng.choice(n, p=d2 / total))
        centroids[j] = x[idx]
        cand = np.einsum("nd,nd->n", x - centroids[j], x - centroids[j])
        d2 = np.minimum(d2, cand)
    return centroids


def kmeans(
    vectors: np.ndarray | Sequence[Sequence[float]],
    k: int,
    seed: int,
    max_iters: int = KMEANS_MAX_ITERS,
) -> KMeansResult:
    """Lloyd iterations from k-means++ seeding, fully deterministic.

    The objective (sum of squared distances to assigned centroids) is
    recorded after every assignment step and never increases. Ties in
    assignment go to the lowest centroid index. A cluster left empty by an
    update step is re-seeded to the point currently farthest from its
    assigned centroid (lowest index on ties), which keeps the objective
    monotone and the run reproducible.
    """
    try:
        x = np.asarray(vectors, dtype=np.float64)
    except ValueError as exc:
        raise DimensionMismatchError(message=f"ragged input vectors: {exc}") from exc
    if x.ndim != 2:
        raise DimensionMismatchError(message=f"expected 2-d input, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise DimensionMismatchError(message="input vectors contain non-finite values")
    n = x.shape[0]
    if k < 1 or k > n:
        raise KTooLargeError(f"k={k} is outside [1, {n}]")

    rng = np.random.default_rng(seed)
    centroids = _plus_plus_seed(x, k, rng)
    history: list[float] = []
    labels = np.zeros(n, dtype=np.int64)
    for iteration in range(1, max_iters + 1):
        d2 = _squared_distances(x, centroids)
        new_labels = d2.argmin(axis=1)
        objective = float(d2[np.arange(n), new_labels].sum())
        if history and __debug__:
            assert objective <= history[-1] + 1e-9, (
                f"objective increased at iteration {iteration}: "
                f"{history[-1]} -> {objective}"
            )
        history.append(objective)
        stable = bool(np.array_equal(new_labels, labels)) and iteration > 1
        labels = new_labels
        counts = np.bincount(labels, minlength=k)
        if stable and counts.min() > 0:
            break
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
        empties = np.flatnonzero(counts == 0)
        if empties.size:
            point_d2 = _squared_distances(x, centroids)[np.arange(n), labels]
            taken: set[int] = set()
            for j in empties:
                order = np.argsort(-point_d2, kind="stable")
                pick = next(int(i) for i in order if int(i) not in taken)
                taken.add(pick)
                centroids[j] = x[pick]
    return KMeansResult(
        labels=labels,
        centroids=centroids,
        objective=history[-1],
        iterations=len(history),
        objective_history=history,
    )


def _unit_rows(x: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(x, axis=1, keepdims=True)
    safe = np.where(norms > 0.0, norms, 1.0)
    return x / safe


def cluster_topics(
    topics: Sequence[str],
    embeddings: Mapping[str, np.ndarray],
    k: int,
    seed: int,
    stats: Sequence[TopicStats] | None = None,
    max_iters: int = KMEANS_MAX_ITERS,
) -> TopicClusters:
    """Cluster topic embeddings and pick one medoid representative per cluster.

    Vectors are unit-normalized so Euclidean distance orders like cosine
    distance. The representative of a cluster is the member topic nearest its
    centroid; ties prefer the higher-frequency topic, then the
    lexicographically smaller name.
    """
    missing = [t for t in topics if t not in embeddings]
    if missing:
        raise MissingEmbeddingError(missing[0])
    dims = {int(np.asarray(embeddings[t]).shape[-1]) for t in topics}
    if len(dims) > 1:
        raise DimensionMismatchError(message=f"mixed embedding dims {sorted(dims)}")
    x = _unit_rows(np.asarray([embeddings[t] for t in topics], dtype=np.float64))
    result = kmeans(x, k, seed, max_iters=max_iters)
    n_k = {s.topic: s.n_k for s in (stats or [])}
    assignments = {t: int(c) for t, c in zip(topics, result.labels)}
    representatives: dict[int, str] = {}
    for j in range(k):
        members = [t for t, c in assignments.items() if c == j]
        if not members:
            continue
        centroid = result.centroids[j]
        def sort_key(t: str) -> tuple[float, int, str]:
            d = float(np.sum((x[topics.index(t)] - centroid) ** 2))
            return (d, -n_k.get(t, 0), t)
        representatives[j] = min(members, key=sort_key)
    return TopicClusters(
        k=k,
        assignments=assignments,
        representatives=representatives,
        objective=result.objective,
    )


def reduce_by_clustering(
    topics: Sequence[str],
    embeddings: Mapping[str, np.ndarray],
    k: int,
    seed: int,
    stats: Sequence[TopicStats] | None = None,
) -> list[str]:
    """Reduce the topic list to cluster representatives, cluster order."""
    clusters = cluster_topics(topics, embeddings, k, seed, stats=stats)
    return [clusters.representatives[j] for j in sorted(clusters.representatives)]


def reduce_by_teacher(
    topics: Sequence[str], endpoint: TeacherEndpoint
) -> list[str]:
    """Ask the teacher to prune the list; answers parsed like discovery output.

    This route inherits whatever randomness the endpoint has, so callers
    should flag it as non-deterministic in run metadata unless the endpoint
    is the mock.
    """
    prompt = (
        "Please shorten the following list of financial topics by removing "
        "redundant or overlapping entries, keeping only topics that are "
        "meaningful for company earnings calls.\n"
        + TOPIC_DISCOVERY_FORMAT
        + "\n\n"
        + "\n".join(f"- {t}" for t in topics)
    )
    raw = endpoint.complete(prompt)
    kept = parse_topic_list(raw)
    canon = {t.lower(): t for t in topics}
    reduced = [canon[t.lower()] for t in kept if t.lower() in canon]
    if not reduced:
        raise EmptyReductionError("teacher pruning returned no known topics")
    return reduced


def elbow_curve(
    topics: Sequence[str],
    embeddings: Mapping[str, np.ndarray],
    k_values: Sequence[int],
    seed: int,
) -> list[tuple[int, float]]:
    """Clustering objective for a range of k, for choosing cluster counts."""
    x = _unit_rows(np.asarray([embeddings[t] for t in topics], dtype=np.float64))
    return [(k, kmeans(x, k, seed).objective) for k in k_values]


def export_review_sheet(
    path: str | Path,
    stats: Sequence[TopicStats],
    examples_by_topic: Mapping[str, Sequence[str]],
    examples_per_topic: int = 3,
    seed: int = 0,
) -> None:
    """Write a reviewer-facing CSV of topics with sampled example sentences."""
    rng = np.random.default_rng(seed)
    with Path(path).open("w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        header = ["topic", "n_k", "share"] + [
            f"example_{i}" for i in range(1, examples_per_topic + 1)
        ]
        writer.writerow(header)
        for s in stats:
            pool = list(examples_by_topic.get(s.topic, ()))
            if len(pool) > examples_per_topic:
                idx = rng.permutation(len(pool))[:examples_per_topic]
                chosen = [pool[i] for i in sorted(idx)]
            else:
                chosen = pool
            chosen = list(chosen) + [""] * (examples_per_topic - len(chosen))
            writer.writerow([s.topic, s.n_k, f"{s.share:.6f}"] + chosen)


def save_cluster_report(clusters: TopicClusters, path: str | Path) -> None:
    payload = {
        "k": clusters.k,
        "objective": clusters.objective,
        "assignments": clusters.assignments,
        "representatives": {str(j): t for j, t in clusters.representatives.items()},
    }
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def save_topics(topics: Sequence[str], path: str | Path) -> None:
    Path(path).write_text(
        json.dumps({"topics": list(topics)}, indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )


def load_topics(path: str | Path) -> list[str]:
    obj = json.loads(Path(path).read_text(encoding="utf-8"))
    return list(obj["topics"])


def save_topic_stats(stats: Sequence[TopicStats], path: str | Path) -> None:
    payload = [
        {"topic": s.topic, "n_k": s.n_k, "share": s.share} for s in stats
    ]
    Path(path).write_text(
        json.dumps(payload, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def load_topic_stats(path: str | Path) -> list[TopicStats]:
    rows = json.loads(Path(path).read_text(encoding="utf-8"))
    return [TopicStats(r["topic"], int(r["n_k"]), float(r["share"])) for r in rows]
