"""Failure-mode taxonomy: k-means over embedded reasoning explanations.

Embeddings are L2-normalized and clustered with seeded k-means (k-means++
initialization, 10 restarts keeping the lowest inertia, Lloyd iterations to
an assignment fixpoint or 300 iterations). Euclidean distance on normalized
vectors orders identically to cosine. Every run is verified post hoc by a
brute-force nearest-centroid check written independently of the vectorized
assignment path, and inertia is monitored for monotone non-increase across
Lloyd iterations.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .backends import ChatClient, EmbeddingClient, text_part, user_message
from .schema import digest_of

logger = logging.getLogger(__name__)

DEFAULT_K = 8  # the taxonomy ships eight failure-mode clusters by default
LABEL_SAMPLE_SIZE = 5

LABEL_PROMPT = (
    "The following texts all describe one common failure mode of a vision-language model. "
    "Reply with a concise label for the failure mode, at most 5 words, and nothing else.\n\n{examples}"
)


class TaxonomyError(ValueError):
    pass


@dataclass
class KMeansResult:
    assignments: np.ndarray  # (n,) int cluster indices
    centroids: np.ndarray  # (k, d)
    inertia: float
    iterations: int


def _kmeans_pp_init(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    """Seeded k-means++ seeding: spread initial centroids by squared distance."""
    n = points.shape[0]
    centroids = np.empty((k, points.shape[1]), dtype=points.dtype)
    centroids[0] = points[rng.integers(n)]
    dist_sq = np.sum((points - centroids[0]) ** 2, axis=1)
    for i in range(1, k):
        total = dist_sq.sum()
        if total <= 0:
            centroids[i] = points[rng.integers(n)]
        else:
            centroids[i] = points[rng.choice(n, p=dist_sq / total)]
        dist_sq = np.minimum(dist_sq, np.sum((points - centroids[i]) ** 2, axis=1))
    return centroids


def _lloyd(points: np.ndarray, centroids: np.ndarray, max_iter: int) -> KMeansResult:
    centroids = centroids.copy()
    assignments = np.full(points.shape[0], -1, dtype=np.int64)
    previous_inertia = np.inf
    for iteration in range(1, max_iter + 1):
        distances = np.sum((points[:, None, :] - centroids[None, :, :]) ** 2, axis=2)
        new_assignments = np.argmin(distances, axis=1)
        inertia = float(distances[np.arange(points.shape[0]), new_assignments].sum())
        if inertia > previous_inertia + 1e-9:
            raise TaxonomyError(
                f"inertia increased across Lloyd iterations ({previous_inertia} -> {inertia}); this is a bug"
            )
        previous_inertia = inertia
        if np.array_equal(new_assignments, assignments):
            return KMeansResult(assignments=assignments, centroids=centroids, inertia=inertia, iterations=iteration)
        assignments = new_assignments
        for j in range(centroids.shape[0]):
            members = points[assignments == j]
            if len(members):  # empty clusters keep their previous centroid
                centroids[j] = members.mean(axis=0)
    return KMeansResult(assignments=assignments, centroids=centroids, inertia=previous_inertia, iterations=max_iter)


def kmeans(points: np.ndarray, k: int, seed: int, n_restarts: int = 10, max_iter: int = 300) -> KMeansResult:
    """Seeded k-means: n_restarts k-means++ starts, lowest inertia kept."""
    points = np.asarray(points, dtype=np.float64)
    if points.ndim != 2:
        raise TaxonomyError("points must be a 2-D array")
    if not 1 <= k <= points.shape[0]:
        raise TaxonomyError(f"need at least k={k} points, got {points.shape[0]}")
    best: Optional[KMeansResult] = None
    for restart in range(n_restarts):
        rng = np.random.default_rng((seed, restart))
        result = _lloyd(points, _kmeans_pp_init(points, k, rng), max_iter)
        if best is None or result.inertia < best.inertia:
            best = result
    assert best is not None
    verify_assignments(points, best.centroids, best.assignments)
    return best


def verify_assignments(points: np.ndarray, centroids: np.ndarray, assignments: np.ndarray) -> None:
    """Brute-force nearest-centroid check, independent of the vectorized path."""
    for i in range(len(points)):
        best_j, best_d = -1, None
        for j in range(len(centroids)):
            d = 0.0
            for a, b in zip(points[i], centroids[j]):
                d += (float(a) - float(b)) ** 2
            if best_d is None or d < best_d:
                best_j, best_d = j, d
        assigned = int(assignments[i])
        assigned_d = sum((float(a) - float(b)) ** 2 for a, b in zip(points[i], centroids[assigned]))
        if assigned_d > best_d + 1e-9:
            raise TaxonomyError(
                f"assignment optimality violated for point {i}: assigned {assigned} "
                f"(d2={assigned_d}) but {best_j} is nearer (d2={best_d})"
            )


@dataclass
class ClusterReport:
    k: int
    assignments: dict[str, int]  # explanation_id -> cluster index
    centroids: list[list[float]]
    shares: list[float]  # percentages, sum == 100 (within rounding)
    seed: int
    inertia: float
    labels: Optional[list[str]] = None

    def validate(self) -> None:
        if len(self.centroids) != self.k:
            raise TaxonomyError(f"|centroids| {len(self.centroids)} != k {self.k}")
        if self.inertia < 0:
            raise TaxonomyError("inertia must be >= 0")
        if abs(sum(self.shares) - 100.0) > 0.5:
            raise TaxonomyError(f"shares sum {sum(self.shares)} not within 100 +- 0.5")
        for explanation_id, cluster in self.assignments.items():
            if not 0 <= cluster < self.k:
                raise TaxonomyError(f"{explanation_id} assigned to out-of-range cluster {cluster}")

    def to_dict(self) -> dict:
        return {
            "k": self.k,
            "assignments": self.assignments,
            "centroids": self.centroids,
            "shares": self.shares,
            "seed": self.seed,
            "inertia": self.inertia,
            "labels": self.labels,
        }

    @classmethod
    def from_dict(cls, row: dict) -> "ClusterReport":
        return cls(
            k=int(row["k"]),
            assignments={str(k): int(v) for k, v in row["assignments"].items()},
            centroids=[list(map(float, c)) for c in row["centroids"]],
            shares=[float(s) for s in row["shares"]],
            seed=int(row["seed"]),
            inertia=float(row["inertia"]),
            labels=row.get("labels"),
        )


def _l2_normalize(vectors: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(vectors, axis=1, keepdims=True)
    norms[norms == 0] = 1.0
    return vectors / norms


def cluster_vectors(vectors: np.ndarray, k: int, seed: int, ids: Sequence[str]) -> ClusterReport:
    points = _l2_normalize(np.asarray(vectors, dtype=np.float64))
    if len(ids) != len(points):
        raise TaxonomyError(f"{len(ids)} ids for {len(points)} vectors")
    result = kmeans(points, k, seed)
    counts = np.bincount(result.assignments, minlength=k)
    shares = [float(c) / len(ids) * 100.0 for c in counts]
    report = ClusterReport(
        k=k,
        assignments={eid: int(a) for eid, a in zip(ids, result.assignments)},
        centroids=[[float(x) for x in c] for c in result.centroids],
        shares=shares,
        seed=seed,
        inertia=result.inertia,
    )
    report.validate()
    return report


def cluster_explanations(
    client: EmbeddingClient,
    explanations: Sequence[str],
    k: int,
    seed: int,
    ids: Optional[Sequence[str]] = None,
) -> ClusterReport:
    """Embed reasoning explanations and cluster them into failure modes.

    Embedding failures abort: clustering a partial corpus is meaningless.
    """
    if k < 1:
        raise TaxonomyError("k must be >= 1")
    if len(explanations) < k:
        raise TaxonomyError(f"need at least k={k} explanations, got {len(explanations)}")
    if ids is None:
        ids = [f"e{i:05d}" for i in range(len(explanations))]
    vectors = np.asarray(client.embed(list(explanations)), dtype=np.float64)
    return cluster_vectors(vectors, k, seed, ids)


def summarize_clusters(
    client: ChatClient,
    report: ClusterReport,
    explanations: dict[str, str],
    sample_size: int = LABEL_SAMPLE_SIZE,
    vectors: Optional[dict[str, Sequence[float]]] = None,
) -> ClusterReport:
    """Attach a short model-written label per cluster.

    The sample_size explanations nearest each centroid are sent to the
    frontier model for a <=5-word label. Labeling never blocks: failures fall
    back to "cluster-<i>", empty clusters are labeled "empty".
    """
    report.validate()
    labels = []
    for cluster_index in range(report.k):
        member_ids = [eid for eid, a in report.assignments.items() if a == cluster_index]
        if not member_ids:
            labels.append("empty")
            continue
        member_ids = _nearest_members(report, member_ids, cluster_index, vectors)[:sample_size]
        examples = "\n".join(f"- {explanations[eid]}" for eid in member_ids if eid in explanations)
        try:
            response = client.chat(client.request([user_message(text_part(LABEL_PROMPT.format(examples=examples)))]))
            label = response.content.strip().strip('"').strip()
        except Exception as exc:
            logger.warning("labeling cluster %d failed: %s", cluster_index, exc)
            label = ""
        labels.append(label or f"cluster-{cluster_index}")
    report.labels = labels
    return report


def _nearest_members(
    report: ClusterReport,
    member_ids: list[str],
    cluster_index: int,
    vectors: Optional[dict[str, Sequence[float]]],
) -> list[str]:
    if not vectors:
        return sorted(member_ids)
    centroid = np.asarray(report.centroids[cluster_index])

    def distance(eid: str) -> float:
        vec = _l2_normalize(np.asarray([vectors[eid]], dtype=np.float64))[0]
        return float(np.sum((vec - centroid) ** 2))

    return sorted(member_ids, key=lambda eid: (distance(eid), eid))


def write_report(report: ClusterReport, path: str | Path) -> str:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    body = report.to_dict()
    path.write_text(json.dumps(body, sort_keys=True, separators=(",", ":"), ensure_ascii=False), encoding="utf-8")
    return digest_of(body)


def write_csv(report: ClusterReport, path: str | Path) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="", encoding="utf-8") as f:
        writer = csv.writer(f)
        writer.writerow(["explanation_id", "cluster", "label"])
        for explanation_id in sorted(report.assignments):
            cluster = report.assignments[explanation_id]
            label = report.labels[cluster] if report.labels else ""
            writer.writerow([explanation_id, cluster, label])
