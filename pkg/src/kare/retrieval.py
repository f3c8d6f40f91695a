"""Patient-graph construction, community relevance scoring, and the greedy
retrieval loop that augments a patient's context with community summaries.

The combined score of a candidate community multiplies five factors: the
weighted direct/indirect node-hit fractions, a decay over already-covered
direct nodes, embedding coherence with the base context, visit recency, and
theme relevance. Selection repeats score-argmax-append-decay for up to N
rounds, never revisiting a community.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cluster import ClusterMapping
from .community import Community, CommunityIndex
from .ehr import PatientRecord, TaskSpec
from .errors import KareError
from .gateway import Gateway
from .kg import Triple, merge_triples, triple_entities

DEFAULT_ALPHA = 0.1
DEFAULT_BETA = 0.7
DEFAULT_LAMBDA1 = 0.2
DEFAULT_LAMBDA2 = 0.2
DEFAULT_LAMBDA3 = 0.3
DEFAULT_MAX_SUMMARIES = 10

HIT_NORMALIZE_COMMUNITY = "community"
HIT_NORMALIZE_PATIENT = "patient"
DECAY_MEAN = "mean"
DECAY_PRODUCT = "product"


@dataclass(frozen=True)
class RelevanceParams:
    alpha: float = DEFAULT_ALPHA
    beta: float = DEFAULT_BETA
    lambda1: float = DEFAULT_LAMBDA1
    lambda2: float = DEFAULT_LAMBDA2
    lambda3: float = DEFAULT_LAMBDA3
    max_summaries: int = DEFAULT_MAX_SUMMARIES
    hit_normalize: str = HIT_NORMALIZE_COMMUNITY
    recency_normalize: bool = True
    decay_mode: str = DECAY_MEAN

    def __post_init__(self):
        if not 0.0 <= self.alpha < 1.0:
            raise KareError("alpha must lie in [0, 1)")
        if not 0.0 < self.beta <= 1.0:
            raise KareError("beta must lie in (0, 1]")
        for name in ("lambda1", "lambda2", "lambda3"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise KareError(f"{name} must lie in [0, 1]")
        if self.max_summaries < 0:
            raise KareError("max_summaries must be >= 0")
        if self.hit_normalize not in (HIT_NORMALIZE_COMMUNITY, HIT_NORMALIZE_PATIENT):
            raise KareError(f"unknown hit_normalize mode {self.hit_normalize!r}")
        if self.decay_mode not in (DECAY_MEAN, DECAY_PRODUCT):
            raise KareError(f"unknown decay_mode {self.decay_mode!r}")


@dataclass(frozen=True)
class PatientGraph:
    """The union of a patient's mapped concept graphs, with nodes split into
    those whose concepts appear in the EHR (direct) and the rest (indirect)."""

    triples: frozenset[Triple]
    direct_nodes: frozenset[str]
    indirect_nodes: frozenset[str]
    latest_visit: Mapping[str, int]
    n_visits: int

    def nodes(self) -> frozenset[str]:
        return self.direct_nodes | self.indirect_nodes


def build_patient_graph(
    record: PatientRecord,
    concept_triples: Mapping[tuple[str, str], frozenset[Triple]],
    mapping: ClusterMapping,
) -> PatientGraph:
    """Union the (already mapped) concept graphs of every code in the record;
    direct nodes are the mapped code displays that actually occur in the
    union, tagged with the most recent visit index mentioning them."""
    pool: list[Triple] = []
    for code in record.codes():
        pool.extend(concept_triples.get(code.key, frozenset()))
    triples = merge_triples(pool)
    graph_nodes = triple_entities(triples)

    def mapped_display(display: str) -> str:
        try:
            return mapping.entity(display)
        except KareError:
            return display  # code never reached the clustered graph

    direct = frozenset(
        term
        for code in record.codes()
        if (term := mapped_display(code.display)) in graph_nodes
    )
    latest: dict[str, int] = {}
    for visit in record.visits:
        for code in visit.all_codes():
            term = mapped_display(code.display)
            if term in direct:
                latest[term] = max(latest.get(term, visit.index), visit.index)
    return PatientGraph(
        triples=triples,
        direct_nodes=direct,
        indirect_nodes=graph_nodes - direct,
        latest_visit=latest,
        n_visits=len(record.visits),
    )


# ---------------------------------------------------------------------------
# Base context
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class BaseContext:
    text: str
    embedding: np.ndarray
    same_label_exhibit: str | None
    diff_label_exhibit: str | None
    flags: tuple[str, ...] = ()


def _code_similarity(a: frozenset, b: frozenset) -> float:
    if not a or not b:
        return 0.0
    return len(a & b) / math.sqrt(len(a) * len(b))


def _render_visits(record: PatientRecord) -> str:
    lines = []
    for visit in record.visits:
        lines.append(f"Visit {visit.index + 1} (day {visit.timestamp}):")
        lines.append(
            "  Conditions: " + (", ".join(c.display for c in visit.conditions) or "none")
        )
        lines.append(
            "  Procedures: " + (", ".join(c.display for c in visit.procedures) or "none")
        )
        lines.append(
            "  Medications: " + (", ".join(c.display for c in visit.medications) or "none")
        )
    return "\n".join(lines)


def build_base_context(
    record: PatientRecord,
    task: TaskSpec,
    reference: Sequence[PatientRecord],
    gateway: Gateway,
) -> BaseContext:
    """Task description, the patient's per-visit code listings, and up to two
    exhibit patients from the reference set: the most code-similar record with
    the same task label and the most similar one with the other label.
    Exhibits are presented by their own outcome, never by the match relation.
    """
    label = record.labels.get(task.task_id)
    if label is None:
        raise KareError(
            f"patient {record.patient_id}: no label for task {task.task_id}"
        )
    own = record.code_keys()
    best: dict[int, tuple[float, str, PatientRecord]] = {}
    for other in reference:
        if other.patient_id == record.patient_id:
            continue
        other_label = other.labels.get(task.task_id)
        if other_label is None:
            continue
        score = _code_similarity(own, other.code_keys())
        current = best.get(other_label)
        if current is None or (-score, other.patient_id) < (-current[0], current[1]):
            best[other_label] = (score, other.patient_id, other)

    flags: list[str] = []
    exhibits: dict[int, str] = {}
    for wanted, role in ((label, "same"), (1 - label, "diff")):
        if wanted in best:
            exhibits[wanted] = _render_visits(best[wanted][2])
        else:
            flags.append(f"no-{role}-label-exhibit")

    sections = [task.description, "Patient EHR:", _render_visits(record)]
    for value in (1, 0):
        if value in exhibits:
            sections.append(f"Example patient with outcome {value}:")
            sections.append(exhibits[value])
    text = "\n\n".join(sections)
    return BaseContext(
        text=text,
        embedding=gateway.embed_one(text),
        same_label_exhibit=best[label][1] if label in best else None,
        diff_label_exhibit=best[1 - label][1] if 1 - label in best else None,
        flags=tuple(flags),
    )


# ---------------------------------------------------------------------------
# Relevance factors (each stays in its documented interval)
# ---------------------------------------------------------------------------


def hit_fraction(
    community: Community,
    node_set: frozenset[str],
    normalize: str = HIT_NORMALIZE_COMMUNITY,
) -> float:
    """Intersection size normalized by community size (default) or by the
    patient node-set size."""
    overlap = len(community.nodes & node_set)
    if normalize == HIT_NORMALIZE_COMMUNITY:
        return overlap / len(community.nodes) if community.nodes else 0.0
    return overlap / len(node_set) if node_set else 0.0


def decay_factor(
    community: Community,
    direct_nodes: frozenset[str],
    hits: Mapping[str, int],
    beta: float,
    mode: str = DECAY_MEAN,
) -> float:
    """Aggregate of beta**hits(v) over the community's direct intersection;
    1.0 when the intersection is empty."""
    shared = community.nodes & direct_nodes
    if not shared:
        return 1.0
    factors = [beta ** hits.get(v, 0) for v in sorted(shared)]
    if mode == DECAY_PRODUCT:
        return math.prod(factors)
    return sum(factors) / len(factors)


def _cosine(a: np.ndarray, b: np.ndarray) -> float:
    na = math.sqrt(float(np.dot(a, a)))
    nb = math.sqrt(float(np.dot(b, b)))
    if na == 0.0 or nb == 0.0:
        return 0.0
    return float(np.dot(a, b)) / (na * nb)


def coherence(summary_emb: np.ndarray, base_emb: np.ndarray, lambda1: float) -> float:
    """1 + lambda1 * cos(summary, base context); zero-norm vectors behave as
    orthogonal."""
    return 1.0 + lambda1 * _cosine(np.asarray(summary_emb), np.asarray(base_emb))


def recency(
    community: Community,
    pg: PatientGraph,
    lambda2: float,
    normalize: bool = True,
) -> float:
    """1 + lambda2 * mean visit position of the community's direct-node hits;
    positions are scaled into [0, 1] unless normalization is off."""
    shared = community.nodes & pg.direct_nodes
    if not shared:
        return 1.0
    span = max(1, pg.n_visits - 1)
    values = []
    for v in sorted(shared):
        idx = pg.latest_visit.get(v, 0)
        values.append(idx / span if normalize else float(idx))
    return 1.0 + lambda2 * (sum(values) / len(values))


def theme_relevance(
    community: Community,
    theme_vectors: Sequence[np.ndarray],
    node_vectors: Mapping[str, np.ndarray],
    lambda3: float,
) -> float:
    """1 + (lambda3 / |community|) * sum over nodes of the best cosine match
    against the theme terms; nodes without embeddings contribute 0."""
    if not community.nodes:
        return 1.0
    total = 0.0
    for node in sorted(community.nodes):
        vec = node_vectors.get(node)
        if vec is None:
            continue
        best = max((_cosine(vec, tv) for tv in theme_vectors), default=0.0)
        total += best
    return 1.0 + lambda3 * total / len(community.nodes)


def relevance(
    community: Community,
    pg: PatientGraph,
    base: BaseContext,
    hits: Mapping[str, int],
    params: RelevanceParams,
    summary_emb: np.ndarray,
    theme_vectors: Sequence[np.ndarray],
    node_vectors: Mapping[str, np.ndarray],
) -> float:
    """The combined score: (direct + alpha * indirect hits) x decay x
    coherence x recency x theme relevance."""
    hit_term = hit_fraction(community, pg.direct_nodes, params.hit_normalize)
    hit_term += params.alpha * hit_fraction(
        community, pg.indirect_nodes, params.hit_normalize
    )
    return (
        hit_term
        * decay_factor(community, pg.direct_nodes, hits, params.beta, params.decay_mode)
        * coherence(summary_emb, base.embedding, params.lambda1)
        * recency(community, pg, params.lambda2, params.recency_normalize)
        * theme_relevance(community, theme_vectors, node_vectors, params.lambda3)
    )


# ---------------------------------------------------------------------------
# Greedy selection
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class SelectedSummary:
    community_id: str
    score: float
    summary: str


@dataclass(frozen=True)
class AugmentedContext:
    base: BaseContext
    selected: tuple[SelectedSummary, ...]
    flags: tuple[str, ...] = ()

    @property
    def text(self) -> str:
        if not self.selected:
            return self.base.text
        lines = ["Relevant medical knowledge:"]
        for i, s in enumerate(self.selected, start=1):
            lines.append(f"{i}. {s.summary}")
        return self.base.text + "\n\n" + "\n".join(lines)


def _argmax_candidate(scored: Iterable[tuple[str, float]]) -> tuple[str, float] | None:
    """Highest score wins; exact ties go to the smallest community id."""
    best: tuple[str, float] | None = None
    for cid, score in scored:
        if best is None or score > best[1] or (score == best[1] and cid < best[0]):
            best = (cid, score)
    return best


def theme_relevance_table(
    index: CommunityIndex,
    task: TaskSpec,
    gateway: Gateway,
    lambda3: float,
) -> dict[str, float]:
    """Theme relevance is patient-independent, so one table per task serves
    every selection run."""
    theme_vectors = [gateway.embed_one(term) for term in task.theme_terms]
    return {
        c.id: theme_relevance(c, theme_vectors, index.node_embeddings, lambda3)
        for c in index.summarized()
    }


def dgra_select(
    index: CommunityIndex,
    pg: PatientGraph,
    base: BaseContext,
    params: RelevanceParams,
    task: TaskSpec,
    gateway: Gateway,
    theme_table: Mapping[str, float] | None = None,
) -> AugmentedContext:
    """Iteratively pick the argmax-relevance summarized community, append its
    summary (theme-specific when available), bump the hit counts of its direct
    nodes, and drop it from the pool; stops after ``max_summaries`` picks or
    when the pool empties.

    ``theme_table`` may carry precomputed theme-relevance factors (from
    ``theme_relevance_table``) to share across patients.
    """
    if theme_table is None:
        theme_table = theme_relevance_table(index, task, gateway, params.lambda3)
    candidates: dict[str, Community] = {c.id: c for c in index.summarized()}
    hits: dict[str, int] = {v: 0 for v in pg.direct_nodes}
    picked: list[SelectedSummary] = []

    # Static score factors never change across iterations; only decay does,
    # and only for candidates sharing a direct node with a selected community.
    static: dict[str, float] = {}
    shared: dict[str, tuple[str, ...]] = {}
    decay: dict[str, float] = {}
    by_direct_node: dict[str, list[str]] = {}
    for cid, community in candidates.items():
        hit_term = hit_fraction(community, pg.direct_nodes, params.hit_normalize)
        hit_term += params.alpha * hit_fraction(
            community, pg.indirect_nodes, params.hit_normalize
        )
        static[cid] = (
            hit_term
            * coherence(index.summary_embedding(cid), base.embedding, params.lambda1)
            * recency(community, pg, params.lambda2, params.recency_normalize)
            * theme_table[cid]
        )
        overlap = tuple(sorted(community.nodes & pg.direct_nodes))
        shared[cid] = overlap
        decay[cid] = 1.0  # beta**0 for every node
        for v in overlap:
            by_direct_node.setdefault(v, []).append(cid)

    def recompute_decay(cid: str) -> float:
        factors = [params.beta ** hits[v] for v in shared[cid]]
        if not factors:
            return 1.0
        if params.decay_mode == DECAY_PRODUCT:
            return math.prod(factors)
        return sum(factors) / len(factors)

    while len(picked) < params.max_summaries and candidates:
        best = _argmax_candidate(
            (cid, static[cid] * decay[cid]) for cid in candidates
        )
        assert best is not None
        cid, score = best
        community = candidates.pop(cid)
        picked.append(
            SelectedSummary(cid, score, community.summary_for(task.task_id) or "")
        )
        touched: set[str] = set()
        for v in shared[cid]:
            hits[v] += 1
            touched.update(by_direct_node[v])
        for other in touched:
            if other in candidates:
                decay[other] = recompute_decay(other)
    flags = ()
    if len(picked) < params.max_summaries:
        flags = ("fewer-candidates-than-requested",)
    return AugmentedContext(base=base, selected=tuple(picked), flags=flags)
