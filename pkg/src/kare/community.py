"""Hierarchically detected graph communities, their summaries, and the
queryable index that retrieval works against.

A community is a node/triple set found at some (run, level); identical node
sets discovered by several runs or carried across levels collapse into one
record holding every (run, level) provenance, so no summary is generated or
retrieved twice.
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np

from .cluster import RefinedGraph
from .ehr import TaskSpec
from .errors import BackendError, IndexBuildError
from .gateway import ChatRequest, Gateway
from .kg import Triple, rows_to_triples, sorted_triples, triples_to_rows
from .leiden import ClusterGraph, hierarchical_levels
from .store import canonical_json, read_embedding_matrix, write_embedding_matrix

logger = logging.getLogger(__name__)

SCHEMA_VERSION = 1

DEFAULT_RUNS = 25
DEFAULT_MAX_CLUSTER_SIZE = 5
DEFAULT_CHUNK_TRIPLES = 20  # Z_s
DEFAULT_MAX_SUMMARY_TRIPLES = 150  # Z_c
DEFAULT_COMBINE_BATCH = 10

GENERAL_SUMMARY = "general"


def theme_key(task_id: str) -> str:
    return f"theme:{task_id}"


def community_id(nodes: Iterable[str]) -> str:
    digest = hashlib.sha256("\x1f".join(sorted(nodes)).encode("utf-8")).hexdigest()
    return f"c{digest[:16]}"


@dataclass(frozen=True)
class Community:
    """A node/triple cluster with its summaries. ``run``/``level`` give the
    first provenance; ``provenances`` lists every (run, level) slice the same
    node set appeared in."""

    id: str
    run: int
    level: int
    nodes: frozenset[str]
    triples: frozenset[Triple]
    provenances: tuple[tuple[int, int], ...]
    summaries: Mapping[str, str] = field(default_factory=dict)

    @property
    def summarized(self) -> bool:
        return GENERAL_SUMMARY in self.summaries

    def summary_for(self, task_id: str | None) -> str | None:
        if task_id is not None and theme_key(task_id) in self.summaries:
            return self.summaries[theme_key(task_id)]
        return self.summaries.get(GENERAL_SUMMARY)


def _induced_triples(graph: RefinedGraph, nodes: frozenset[str]) -> frozenset[Triple]:
    return frozenset(
        t for t in graph.triples if t.head in nodes and t.tail in nodes
    )


def hierarchical_leiden(
    graph: RefinedGraph,
    runs: int = DEFAULT_RUNS,
    base_seed: int = 0,
    max_cluster_size: int = DEFAULT_MAX_CLUSTER_SIZE,
) -> list[Community]:
    """Run the seeded partitioner ``runs`` times (seed ``base_seed + run``),
    split oversized blocks into deeper levels, and dedup identical node sets
    across all (run, level) slices."""
    if not graph.triples:
        raise IndexBuildError("community detection needs a nonempty graph")
    if runs < 1:
        raise IndexBuildError("runs must be >= 1")
    cg = ClusterGraph.from_triples(graph.triples)
    records: dict[str, Community] = {}
    for run in range(1, runs + 1):
        rng = random.Random(base_seed + run)
        levels = hierarchical_levels(cg, rng, max_cluster_size)
        for level, blocks in enumerate(levels):
            for block in blocks:
                cid = community_id(block)
                if cid in records:
                    prior = records[cid]
                    records[cid] = replace(
                        prior, provenances=prior.provenances + ((run, level),)
                    )
                else:
                    records[cid] = Community(
                        id=cid,
                        run=run,
                        level=level,
                        nodes=block,
                        triples=_induced_triples(graph, block),
                        provenances=((run, level),),
                    )
    return sorted(records.values(), key=lambda c: c.id)


def communities_at(
    communities: Sequence[Community], run: int, level: int
) -> list[Community]:
    return [c for c in communities if (run, level) in c.provenances]


# ---------------------------------------------------------------------------
# Summarization
# ---------------------------------------------------------------------------


def _render_triples(triples: Sequence[Triple]) -> str:
    return "\n".join(f"({t.head}; {t.relation}; {t.tail})" for t in triples)


def _summary_request(kind: str, triples: Sequence[Triple], theme: TaskSpec | None):
    if kind == GENERAL_SUMMARY:
        return ChatRequest("summary_general", {"triples": _render_triples(triples)})
    assert theme is not None
    return ChatRequest(
        "summary_theme",
        {
            "triples": _render_triples(triples),
            "theme": theme.task_id,
            "theme_terms": ", ".join(theme.theme_terms),
        },
    )


def _combine(gateway: Gateway, parts: list[str], batch: int) -> str:
    while len(parts) > 1:
        merged = []
        for i in range(0, len(parts), batch):
            chunk = parts[i : i + batch]
            if len(chunk) == 1:
                merged.append(chunk[0])
                continue
            req = ChatRequest(
                "summary_combine",
                {"summaries": "\n".join(f"- {p}" for p in chunk)},
            )
            merged.append(gateway.complete(req).text)
        parts = merged
    return parts[0]


def summarize_community(
    gateway: Gateway,
    community: Community,
    themes: Sequence[TaskSpec] = (),
    chunk_triples: int = DEFAULT_CHUNK_TRIPLES,
    max_summary_triples: int = DEFAULT_MAX_SUMMARY_TRIPLES,
    seed: int = 0,
    combine_batch: int = DEFAULT_COMBINE_BATCH,
) -> dict[str, str] | None:
    """General plus one per-theme summary. Up to ``chunk_triples`` triples go
    through a single prompt; bigger communities get a seeded shuffle, a split
    into ceil(size / chunk_triples) chunks, one summary per chunk, and batched
    combine calls until a single text remains. Returns None (community left
    unsummarized) if the backend fails after retries."""
    size = len(community.triples)
    if size > max_summary_triples:
        raise IndexBuildError(
            f"community {community.id} exceeds the summarizable size ({size})"
        )
    ordered = sorted_triples(community.triples)
    if size > chunk_triples:
        random.Random(seed).shuffle(ordered)
        chunks = [
            ordered[i : i + chunk_triples] for i in range(0, size, chunk_triples)
        ]
    else:
        chunks = [ordered]
    kinds: list[tuple[str, TaskSpec | None]] = [(GENERAL_SUMMARY, None)]
    kinds.extend((theme_key(t.task_id), t) for t in themes)
    summaries = {}
    try:
        for kind, theme in kinds:
            parts = [
                gateway.complete(_summary_request(kind, chunk, theme)).text
                for chunk in chunks
            ]
            summaries[kind] = parts[0] if len(parts) == 1 else _combine(
                gateway, parts, combine_batch
            )
    except BackendError as exc:
        logger.warning("community %s left unsummarized: %s", community.id, exc)
        return None
    return summaries


def summarize_all(
    gateway: Gateway,
    communities: Sequence[Community],
    themes: Sequence[TaskSpec] = (),
    chunk_triples: int = DEFAULT_CHUNK_TRIPLES,
    max_summary_triples: int = DEFAULT_MAX_SUMMARY_TRIPLES,
    seed: int = 0,
    combine_batch: int = DEFAULT_COMBINE_BATCH,
) -> list[Community]:
    """Summarize every community small enough to summarize; oversized ones
    keep an empty summary map and stay invisible to retrieval."""
    out = []
    for community in communities:
        if len(community.triples) > max_summary_triples:
            out.append(community)
            continue
        summaries = summarize_community(
            gateway, community, themes, chunk_triples, max_summary_triples,
            seed, combine_batch,
        )
        out.append(community if summaries is None else replace(community, summaries=summaries))
    return out


# ---------------------------------------------------------------------------
# Index
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class IndexParams:
    runs: int = DEFAULT_RUNS
    base_seed: int = 0
    max_cluster_size: int = DEFAULT_MAX_CLUSTER_SIZE
    chunk_triples: int = DEFAULT_CHUNK_TRIPLES
    max_summary_triples: int = DEFAULT_MAX_SUMMARY_TRIPLES

    @property
    def seeds(self) -> tuple[int, ...]:
        return tuple(self.base_seed + run for run in range(1, self.runs + 1))


@dataclass
class CommunityIndex:
    """Queryable store of summarized communities: inverted node lookup plus
    cached summary and node-term embeddings."""

    communities: list[Community]
    inverted: dict[str, tuple[str, ...]]
    params: IndexParams
    summary_embeddings: dict[str, np.ndarray]
    node_embeddings: dict[str, np.ndarray]
    schema_version: int = SCHEMA_VERSION

    def get(self, cid: str) -> Community:
        return self._by_id[cid]

    def __post_init__(self):
        self._by_id = {c.id: c for c in self.communities}

    def lookup(self, term: str) -> tuple[str, ...]:
        return self.inverted.get(term, ())

    def summarized(self) -> list[Community]:
        return [c for c in self.communities if c.summarized]

    def summary_embedding(self, cid: str, kind: str = GENERAL_SUMMARY) -> np.ndarray | None:
        return self.summary_embeddings.get(f"{cid}::{kind}")


def build_index(
    communities: Sequence[Community],
    gateway: Gateway,
    params: IndexParams,
) -> CommunityIndex:
    """Build the inverted index and embed every stored summary and node term."""
    ids = [c.id for c in communities]
    if len(set(ids)) != len(ids):
        raise IndexBuildError("communities must be deduplicated before indexing")
    inverted: dict[str, list[str]] = {}
    for c in communities:
        for node in c.nodes:
            inverted.setdefault(node, []).append(c.id)
    inverted_sorted = {term: tuple(sorted(cids)) for term, cids in inverted.items()}

    summary_keys = []
    summary_texts = []
    for c in communities:
        for kind in sorted(c.summaries):
            summary_keys.append(f"{c.id}::{kind}")
            summary_texts.append(c.summaries[kind])
    summary_embeddings = {}
    if summary_texts:
        matrix = gateway.embed(summary_texts)
        summary_embeddings = {k: matrix[i] for i, k in enumerate(summary_keys)}
    for c in communities:
        if c.summarized and f"{c.id}::{GENERAL_SUMMARY}" not in summary_embeddings:
            raise IndexBuildError(f"missing summary embedding for community {c.id}")

    terms = sorted({node for c in communities for node in c.nodes})
    node_embeddings = {}
    if terms:
        matrix = gateway.embed(terms)
        node_embeddings = {t: matrix[i] for i, t in enumerate(terms)}

    return CommunityIndex(
        communities=list(communities),
        inverted=inverted_sorted,
        params=params,
        summary_embeddings=summary_embeddings,
        node_embeddings=node_embeddings,
    )


def save_index(index: CommunityIndex, directory: str | Path) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    with open(directory / "communities.jsonl", "w", encoding="utf-8", newline="\n") as fh:
        for c in sorted(index.communities, key=lambda c: c.id):
            fh.write(
                canonical_json(
                    {
                        "id": c.id,
                        "run": c.run,
                        "level": c.level,
                        "provenances": [list(p) for p in c.provenances],
                        "nodes": sorted(c.nodes),
                        "triples": triples_to_rows(c.triples),
                        "summaries": dict(sorted(c.summaries.items())),
                        "schema_version": index.schema_version,
                    }
                )
                + "\n"
            )
    (directory / "inverted.json").write_text(
        canonical_json(
            {
                "schema_version": index.schema_version,
                "entries": {t: list(v) for t, v in sorted(index.inverted.items())},
            }
        )
        + "\n",
        encoding="utf-8",
    )
    summary_keys = sorted(index.summary_embeddings)
    node_keys = sorted(index.node_embeddings)
    (directory / "meta.json").write_text(
        canonical_json(
            {
                "schema_version": index.schema_version,
                "params": {
                    "runs": index.params.runs,
                    "base_seed": index.params.base_seed,
                    "max_cluster_size": index.params.max_cluster_size,
                    "chunk_triples": index.params.chunk_triples,
                    "max_summary_triples": index.params.max_summary_triples,
                    "seeds": list(index.params.seeds),
                },
                "summary_rows": summary_keys,
                "node_rows": node_keys,
            }
        )
        + "\n",
        encoding="utf-8",
    )
    dim = 0
    for vec in index.summary_embeddings.values():
        dim = len(vec)
        break
    else:
        for vec in index.node_embeddings.values():
            dim = len(vec)
            break
    def matrix_for(keys, table):
        if not keys:
            return np.zeros((0, dim), dtype=np.float32)
        return np.stack([table[k] for k in keys]).astype(np.float32)

    write_embedding_matrix(directory / "summaries.emb", matrix_for(summary_keys, index.summary_embeddings))
    write_embedding_matrix(directory / "nodes.emb", matrix_for(node_keys, index.node_embeddings))


def load_index(directory: str | Path) -> CommunityIndex:
    directory = Path(directory)
    meta = json.loads((directory / "meta.json").read_text(encoding="utf-8"))
    if meta.get("schema_version") != SCHEMA_VERSION:
        raise IndexBuildError(f"unsupported index schema version {meta.get('schema_version')}")
    raw_params = meta["params"]
    params = IndexParams(
        runs=raw_params["runs"],
        base_seed=raw_params["base_seed"],
        max_cluster_size=raw_params["max_cluster_size"],
        chunk_triples=raw_params["chunk_triples"],
        max_summary_triples=raw_params["max_summary_triples"],
    )
    communities = []
    with open(directory / "communities.jsonl", "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            row = json.loads(line)
            communities.append(
                Community(
                    id=row["id"],
                    run=row["run"],
                    level=row["level"],
                    nodes=frozenset(row["nodes"]),
                    triples=rows_to_triples(row["triples"]),
                    provenances=tuple(tuple(p) for p in row["provenances"]),
                    summaries=dict(row["summaries"]),
                )
            )
    inverted_payload = json.loads((directory / "inverted.json").read_text(encoding="utf-8"))
    inverted = {t: tuple(v) for t, v in inverted_payload["entries"].items()}
    summary_matrix = read_embedding_matrix(directory / "summaries.emb")
    node_matrix = read_embedding_matrix(directory / "nodes.emb")
    summary_embeddings = {
        key: summary_matrix[i] for i, key in enumerate(meta["summary_rows"])
    }
    node_embeddings = {key: node_matrix[i] for i, key in enumerate(meta["node_rows"])}
    index = CommunityIndex(
        communities=communities,
        inverted=inverted,
        params=params,
        summary_embeddings=summary_embeddings,
        node_embeddings=node_embeddings,
    )
    _validate_index(index)
    return index


def _validate_index(index: CommunityIndex) -> None:
    rebuilt: dict[str, set[str]] = {}
    for c in index.communities:
        for node in c.nodes:
            rebuilt.setdefault(node, set()).add(c.id)
    declared = {t: set(v) for t, v in index.inverted.items()}
    if rebuilt != declared:
        raise IndexBuildError("inverted index disagrees with community node sets")
    for c in index.communities:
        if c.summarized and index.summary_embedding(c.id) is None:
            raise IndexBuildError(f"missing summary embedding for community {c.id}")
