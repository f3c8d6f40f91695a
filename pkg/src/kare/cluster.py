"""Embedding-based synonym resolution: average-linkage agglomerative
clustering on cosine distance, silhouette-guided threshold selection, and the
entity/relation mappings that rewrite the global graph into its refined form.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
from scipy.cluster.hierarchy import fcluster, linkage
from scipy.spatial.distance import squareform
from sklearn.metrics import silhouette_score

from .errors import ConfigurationError, KareError, MappingError
from .kg import GlobalGraph, Triple, merge_triples, triple_entities

DEFAULT_THRESHOLD_GRID = tuple(round(0.02 * i, 2) for i in range(1, 21))
DEFAULT_SAMPLE_SIZE = 2000
DEFAULT_SAMPLE_SEED = 20240


def cosine_distance_matrix(vectors: np.ndarray) -> np.ndarray:
    """Pairwise cosine distances in [0, 2]; zero-norm rows behave as if
    orthogonal to everything (distance 1)."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.ndim != 2:
        raise KareError("expected a 2-d array of vectors")
    norms = np.linalg.norm(arr, axis=1)
    safe = np.where(norms > 0, norms, 1.0)
    unit = arr / safe[:, None]
    unit[norms == 0] = 0.0
    dist = 1.0 - unit @ unit.T
    np.clip(dist, 0.0, 2.0, out=dist)
    np.fill_diagonal(dist, 0.0)
    return dist


def _linkage_tree(distances: np.ndarray) -> np.ndarray:
    condensed = squareform(distances, checks=False)
    return linkage(condensed, method="average")


def _labels_to_clusters(labels: np.ndarray) -> list[list[int]]:
    groups: dict[int, list[int]] = {}
    for idx, label in enumerate(labels):
        groups.setdefault(int(label), []).append(idx)
    return sorted(groups.values(), key=lambda members: members[0])


def agglomerative_cluster(vectors: np.ndarray, threshold: float) -> list[list[int]]:
    """Average-linkage clusters of row indices; merging stops once the closest
    pair of clusters exceeds the cosine-distance threshold."""
    if not 0.0 < threshold < 2.0:
        raise KareError("threshold must lie in (0, 2)")
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.size == 0:
        return []
    if arr.shape[0] == 1:
        return [[0]]
    tree = _linkage_tree(cosine_distance_matrix(arr))
    labels = fcluster(tree, t=threshold, criterion="distance")
    return _labels_to_clusters(labels)


def silhouette_threshold_search(
    vectors: np.ndarray, candidates: Sequence[float]
) -> float:
    """The candidate distance threshold whose clustering scores the highest
    mean silhouette (cosine distance); candidates yielding fewer than two
    clusters or only singletons are skipped, and ties go to the smaller
    threshold."""
    arr = np.asarray(vectors, dtype=np.float64)
    if arr.shape[0] < 3:
        raise ConfigurationError("threshold search needs at least 3 vectors")
    if not candidates:
        raise ConfigurationError("threshold search needs at least one candidate")
    for c in candidates:
        if not 0.0 < c < 2.0:
            raise ConfigurationError(f"candidate threshold {c} outside (0, 2)")
    distances = cosine_distance_matrix(arr)
    tree = _linkage_tree(distances)
    best: tuple[float, float] | None = None  # (score, threshold)
    for threshold in sorted(candidates):
        labels = fcluster(tree, t=threshold, criterion="distance")
        n_clusters = len(set(labels.tolist()))
        if n_clusters < 2 or n_clusters == arr.shape[0]:
            continue
        score = float(silhouette_score(distances, labels, metric="precomputed"))
        if best is None or score > best[0]:
            best = (score, threshold)
    if best is None:
        raise ConfigurationError("no candidate threshold produced a scoreable clustering")
    return best[1]


def sample_terms(terms: Sequence[str], size: int, seed: int) -> list[str]:
    """Uniform random sample without replacement, stable for a fixed seed."""
    ordered = sorted(terms)
    if len(ordered) <= size:
        return ordered
    return sorted(random.Random(seed).sample(ordered, size))


@dataclass(frozen=True)
class ClusterMapping:
    """Total, idempotent term -> representative maps for entities and
    relations, with the cluster rosters kept for audit."""

    entity_map: Mapping[str, str]
    relation_map: Mapping[str, str]
    entity_clusters: tuple[tuple[str, ...], ...]
    relation_clusters: tuple[tuple[str, ...], ...]
    theta_e: float
    theta_r: float

    def entity(self, term: str) -> str:
        try:
            return self.entity_map[term]
        except KeyError:
            raise MappingError(f"entity term not covered by mapping: {term!r}") from None

    def relation(self, term: str) -> str:
        try:
            return self.relation_map[term]
        except KeyError:
            raise MappingError(f"relation term not covered by mapping: {term!r}") from None


def _representative(members: Sequence[str], vectors: Mapping[str, np.ndarray]) -> str:
    stacked = np.stack([np.asarray(vectors[m], dtype=np.float64) for m in members])
    center = stacked.mean(axis=0)
    distances = cosine_distance_matrix(np.vstack([stacked, center]))[-1, :-1]
    order = sorted(range(len(members)), key=lambda i: (distances[i], members[i]))
    return members[order[0]]


def build_mappings(
    entity_clusters: Sequence[Sequence[str]],
    relation_clusters: Sequence[Sequence[str]],
    vectors: Mapping[str, np.ndarray],
    theta_e: float,
    theta_r: float,
) -> ClusterMapping:
    """Each cluster maps to the member closest to its mean embedding; distance
    ties go to the lexicographically smallest term."""

    def to_map(clusters):
        mapping = {}
        rosters = []
        for cluster in clusters:
            members = sorted(cluster)
            missing = [m for m in members if m not in vectors]
            if missing:
                raise MappingError(f"terms without embeddings: {missing[:3]}")
            rep = _representative(members, vectors)
            for member in members:
                mapping[member] = rep
            rosters.append(tuple(members))
        return mapping, tuple(rosters)

    entity_map, entity_rosters = to_map(entity_clusters)
    relation_map, relation_rosters = to_map(relation_clusters)
    return ClusterMapping(
        entity_map, relation_map, entity_rosters, relation_rosters, theta_e, theta_r
    )


@dataclass(frozen=True)
class RefinedGraph:
    """The global graph after synonym collapse, with per-concept membership
    rewritten through the same mapping."""

    triples: frozenset[Triple]
    nodes: frozenset[str]
    relations: frozenset[str]
    concept_triples: Mapping[tuple[str, str], frozenset[tuple[str, str, str]]]

    def triples_for_concept(self, key: tuple[str, str]) -> frozenset[Triple]:
        wanted = self.concept_triples.get(key, frozenset())
        return frozenset(t for t in self.triples if t.key in wanted)


def refine_graph(graph: GlobalGraph, mapping: ClusterMapping) -> RefinedGraph:
    """Rewrite every triple through (entity, relation, entity) maps and
    collapse exact duplicates."""
    mapped = {}
    for t in graph.triples:
        new = Triple(
            mapping.entity(t.head), mapping.relation(t.relation), mapping.entity(t.tail),
            t.sources,
        )
        mapped[t.key] = new
    triples = merge_triples(mapped.values())
    concept_triples = {}
    for key, members in graph.membership.items():
        concept_triples[key] = frozenset(mapped[k].key for k in members if k in mapped)
    return RefinedGraph(
        triples=triples,
        nodes=triple_entities(triples),
        relations=frozenset(t.relation for t in triples),
        concept_triples=concept_triples,
    )


def save_mapping(mapping: ClusterMapping, path: str | Path) -> None:
    payload = {
        "entities": dict(sorted(mapping.entity_map.items())),
        "relations": dict(sorted(mapping.relation_map.items())),
        "theta_e": mapping.theta_e,
        "theta_r": mapping.theta_r,
        "entity_clusters": [list(c) for c in mapping.entity_clusters],
        "relation_clusters": [list(c) for c in mapping.relation_clusters],
    }
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=True, indent=1) + "\n",
        encoding="utf-8",
    )


def load_mapping(path: str | Path) -> ClusterMapping:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    return ClusterMapping(
        entity_map=dict(payload["entities"]),
        relation_map=dict(payload["relations"]),
        entity_clusters=tuple(tuple(c) for c in payload.get("entity_clusters", [])),
        relation_clusters=tuple(tuple(c) for c in payload.get("relation_clusters", [])),
        theta_e=float(payload["theta_e"]),
        theta_r=float(payload["theta_r"]),
    )
