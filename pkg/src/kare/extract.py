"""Concept-KG extraction from three sources: an external biomedical graph,
an embedded document corpus, and a chat model, anchored by EHR co-occurrence."""

from __future__ import annotations

import logging
from collections import Counter, defaultdict
from dataclasses import dataclass
from typing import Hashable, Iterable, Mapping, Sequence, TypeVar

import numpy as np

from .ehr import MedicalCode, PatientRecord
from .errors import KareError
from .gateway import ChatRequest, Gateway, parse_bracketed_triples
from .kg import SOURCE_BC, SOURCE_KG, SOURCE_LLM, ConceptKG, Triple, merge_triples
from .paths import ExternalGraph, PathSearchParams, bidirectional_shortest_paths
from .store import CorpusStore, Document

logger = logging.getLogger(__name__)

T = TypeVar("T", bound=Hashable)

DEFAULT_TOP_COOCCUR = 20
DEFAULT_TOP_DOCUMENTS = 3
DEFAULT_SET_FILTER_THRESHOLD = 5
MAX_TRIPLES_PER_TEXT = 10
LLM_SUBGRAPH_HOPS = 3


@dataclass(frozen=True)
class CoOccurrenceTable:
    """Per concept, the strongest co-occurring concepts by patient count,
    truncated to the top X and ordered (count desc, code asc)."""

    top_x: int
    entries: Mapping[tuple[str, str], tuple[tuple[MedicalCode, int], ...]]
    concepts: Mapping[tuple[str, str], MedicalCode]

    def related(self, concept: MedicalCode) -> tuple[tuple[MedicalCode, int], ...]:
        return self.entries.get(concept.key, ())


def collect_cooccurrence(
    cohort: Sequence[PatientRecord], top_x: int = DEFAULT_TOP_COOCCUR
) -> CoOccurrenceTable:
    """Count, for every concept pair, the number of patients whose records
    contain both; keep each concept's top X partners."""
    if top_x < 1:
        raise KareError("top_x must be >= 1")
    registry: dict[tuple[str, str], MedicalCode] = {}
    pair_counts: Counter[tuple[tuple[str, str], tuple[str, str]]] = Counter()
    for record in cohort:
        keys = sorted(record.code_keys())
        for code in record.codes():
            registry.setdefault(code.key, code)
        for i, a in enumerate(keys):
            for b in keys[i + 1:]:
                pair_counts[(a, b)] += 1
    neighbors: dict[tuple[str, str], list[tuple[MedicalCode, int]]] = defaultdict(list)
    for (a, b), count in pair_counts.items():
        neighbors[a].append((registry[b], count))
        neighbors[b].append((registry[a], count))
    entries = {}
    for key, related in neighbors.items():
        related.sort(key=lambda item: (-item[1], item[0].code, item[0].vocabulary))
        entries[key] = tuple(related[:top_x])
    return CoOccurrenceTable(top_x, entries, registry)


def filter_concept_sets(
    sets: Sequence[frozenset[T]], threshold: int = DEFAULT_SET_FILTER_THRESHOLD
) -> list[frozenset[T]]:
    """Scan in order, keeping a set only if its symmetric difference with every
    previously kept set has at least ``threshold`` elements."""
    if threshold < 0:
        raise KareError("threshold must be >= 0")
    kept: list[frozenset[T]] = []
    for candidate in sets:
        if all(len(candidate ^ prior) >= threshold for prior in kept):
            kept.append(candidate)
    return kept


def retrieve_documents(
    gateway: Gateway,
    corpus: CorpusStore,
    concepts: Iterable[str],
    top_n: int = DEFAULT_TOP_DOCUMENTS,
) -> list[Document]:
    """Top-n documents by cosine similarity between the embedded concatenated
    concept names and the corpus embeddings; ties broken by document id."""
    if len(corpus) == 0:
        return []
    names = sorted({c for c in concepts if c})
    if not names:
        return []
    query = gateway.embed_one(", ".join(names)).astype(np.float64)
    matrix = corpus.embeddings.astype(np.float64)
    if matrix.shape[1] != query.shape[0]:
        raise KareError(
            f"corpus embedding dimension {matrix.shape[1]} != query dimension {query.shape[0]}"
        )
    qnorm = np.linalg.norm(query)
    norms = np.linalg.norm(matrix, axis=1)
    sims = np.zeros(len(corpus))
    valid = (norms > 0) & (qnorm > 0)
    if qnorm > 0:
        sims[valid] = (matrix[valid] @ query) / (norms[valid] * qnorm)
    ranked = sorted(
        range(len(corpus)), key=lambda i: (-sims[i], corpus.documents[i].doc_id)
    )
    return [corpus.documents[i] for i in ranked[:top_n]]


def _normalize_entity(entity: str, by_lower: Mapping[str, str]) -> str:
    return by_lower.get(entity.strip().lower(), entity)


def extract_triples_from_text(
    gateway: Gateway,
    text: str,
    concepts: Sequence[MedicalCode],
) -> list[Triple]:
    """Ask the chat backend for relationships supported by one document and
    parse them tolerantly; entities matching a concept display are normalized
    to that exact display. Caps at MAX_TRIPLES_PER_TEXT triples."""
    request = ChatRequest(
        "triples_from_text",
        {"text": text, "concepts": "; ".join(c.display for c in concepts)},
    )
    response = gateway.complete(request).text
    parsed = parse_bracketed_triples(response)
    if not parsed:
        logger.warning("no triples parsed from response: %.200s", response)
        return []
    by_lower = {c.display.lower(): c.display for c in concepts}
    triples = []
    for head, relation, tail in parsed[:MAX_TRIPLES_PER_TEXT]:
        try:
            triples.append(
                Triple.single(
                    _normalize_entity(head, by_lower),
                    relation,
                    _normalize_entity(tail, by_lower),
                    SOURCE_BC,
                )
            )
        except KareError:
            continue  # malformed item dropped, not the batch
    return triples


def _hop_limited_triples(
    triples: Sequence[tuple[str, str, str]], start: str, hops: int
) -> frozenset[Triple]:
    adjacency: dict[str, set[str]] = defaultdict(set)
    for head, _, tail in triples:
        adjacency[head].add(tail)
        adjacency[tail].add(head)
    if start not in adjacency:
        return frozenset()
    depth = {start: 0}
    frontier = [start]
    for level in range(1, hops + 1):
        nxt = []
        for node in frontier:
            for nbr in adjacency[node]:
                if nbr not in depth:
                    depth[nbr] = level
                    nxt.append(nbr)
        frontier = nxt
    reachable = set(depth)
    return merge_triples(
        Triple.single(h, r, t, SOURCE_LLM)
        for h, r, t in triples
        if h in reachable and t in reachable
    )


def extract_triples_from_llm(
    gateway: Gateway,
    concepts: Sequence[MedicalCode],
) -> dict[tuple[str, str], ConceptKG]:
    """Prompt the chat backend over a concept set; each concept keeps only the
    parsed triples reachable within 3 undirected hops of it."""
    request = ChatRequest(
        "triples_from_concepts",
        {"concepts": "; ".join(c.display for c in concepts)},
    )
    response = gateway.complete(request).text
    parsed = parse_bracketed_triples(response)
    if not parsed:
        logger.warning("no triples parsed from response: %.200s", response)
        return {c.key: ConceptKG(c) for c in concepts}
    out = {}
    for concept in concepts:
        out[concept.key] = ConceptKG(
            concept, _hop_limited_triples(parsed, concept.display, LLM_SUBGRAPH_HOPS)
        )
    return out


def extract_kg_subgraph(
    graph: ExternalGraph,
    concept: MedicalCode,
    related: Sequence[MedicalCode],
    params: PathSearchParams = PathSearchParams(),
) -> ConceptKG:
    """Union of the labeled edges along every shortest path between the
    concept's node and each related concept's node."""
    start = graph.resolve(concept.display)
    if start is None:
        logger.warning("concept %r not resolvable in external graph", concept.display)
        return ConceptKG(concept)
    triples: list[Triple] = []
    for other in related:
        end = graph.resolve(other.display)
        if end is None or end == start:
            continue
        paths = bidirectional_shortest_paths(
            graph, start, end,
            max_length=params.max_length,
            max_paths=params.max_paths,
            max_nodes=params.max_nodes,
        )
        for path in paths:
            for a, b in zip(path, path[1:]):
                for head, relation, tail in graph.relations_between(a, b):
                    triples.append(Triple.single(head, relation, tail, SOURCE_KG))
    return ConceptKG(concept, merge_triples(triples))
