"""Triple store primitives: source-tagged triples, per-concept graphs, and the
global multi-concept union with per-concept membership tracking.

Triple identity is (head, relation, tail); the same fact arriving from several
sources is held once with the union of its source tags.
"""

from __future__ import annotations

import json
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Mapping

from .ehr import MedicalCode
from .errors import KareError

SOURCE_KG = "KG"
SOURCE_BC = "BC"
SOURCE_LLM = "LLM"
SOURCES = (SOURCE_KG, SOURCE_BC, SOURCE_LLM)

TripleKey = tuple[str, str, str]

_CONTROL = re.compile(r"[\x00-\x1f\x7f]")


def _clean_term(value: str, what: str) -> str:
    term = value.strip()
    if not term:
        raise KareError(f"triple {what} must be nonempty after trimming")
    if _CONTROL.search(term):
        raise KareError(f"triple {what} contains control characters: {value!r}")
    return term


@dataclass(frozen=True)
class Triple:
    """A (head, relation, tail) fact tagged with the sources that produced it."""

    head: str
    relation: str
    tail: str
    sources: frozenset[str] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "head", _clean_term(self.head, "head"))
        object.__setattr__(self, "relation", _clean_term(self.relation, "relation"))
        object.__setattr__(self, "tail", _clean_term(self.tail, "tail"))
        unknown = set(self.sources) - set(SOURCES)
        if unknown:
            raise KareError(f"unknown triple sources: {sorted(unknown)}")

    @classmethod
    def single(cls, head: str, relation: str, tail: str, source: str) -> "Triple":
        return cls(head, relation, tail, frozenset({source}))

    @property
    def key(self) -> TripleKey:
        return (self.head, self.relation, self.tail)

    def with_sources(self, sources: frozenset[str]) -> "Triple":
        return Triple(self.head, self.relation, self.tail, sources)


def merge_triples(triples: Iterable[Triple]) -> frozenset[Triple]:
    """Dedup by (head, relation, tail), unioning source tags."""
    merged: dict[TripleKey, frozenset[str]] = {}
    first: dict[TripleKey, Triple] = {}
    for t in triples:
        key = t.key
        if key in merged:
            merged[key] = merged[key] | t.sources
        else:
            merged[key] = t.sources
            first[key] = t
    out = []
    for key, sources in merged.items():
        keeper = first[key]
        # Reuse the already-validated instance when its tags are complete.
        out.append(keeper if keeper.sources == sources else keeper.with_sources(sources))
    return frozenset(out)


def sorted_triples(triples: Iterable[Triple]) -> list[Triple]:
    return sorted(triples, key=lambda t: t.key)


def triple_entities(triples: Iterable[Triple]) -> frozenset[str]:
    out = set()
    for t in triples:
        out.add(t.head)
        out.add(t.tail)
    return frozenset(out)


@dataclass(frozen=True)
class ConceptKG:
    """All triples gathered for one medical concept."""

    concept: MedicalCode
    triples: frozenset[Triple] = frozenset()

    def __post_init__(self):
        object.__setattr__(self, "triples", merge_triples(self.triples))

    def __len__(self) -> int:
        return len(self.triples)

    def entities(self) -> frozenset[str]:
        return triple_entities(self.triples)


def merge_concept_kgs(parts: Iterable[ConceptKG]) -> ConceptKG:
    """Union the per-source graphs of one concept."""
    parts = list(parts)
    if not parts:
        raise KareError("merge_concept_kgs needs at least one part")
    concept = parts[0].concept
    for part in parts[1:]:
        if part.concept.key != concept.key:
            raise KareError(
                f"concept mismatch in merge: {part.concept.key} vs {concept.key}"
            )
    return ConceptKG(concept, merge_triples(t for p in parts for t in p.triples))


@dataclass(frozen=True)
class GlobalGraph:
    """Union of all concept graphs; triples dedup'd across concepts while each
    concept keeps a membership record of its own triple keys."""

    triples: frozenset[Triple]
    concepts: Mapping[tuple[str, str], MedicalCode]
    membership: Mapping[tuple[str, str], frozenset[TripleKey]]

    def entities(self) -> frozenset[str]:
        return triple_entities(self.triples)

    def relations(self) -> frozenset[str]:
        return frozenset(t.relation for t in self.triples)

    def concept_triples(self, key: tuple[str, str]) -> frozenset[Triple]:
        wanted = self.membership.get(key, frozenset())
        return frozenset(t for t in self.triples if t.key in wanted)


def union_global(concept_kgs: Iterable[ConceptKG]) -> GlobalGraph:
    concepts: dict[tuple[str, str], MedicalCode] = {}
    membership: dict[tuple[str, str], set[TripleKey]] = {}
    pool: list[Triple] = []
    for ckg in concept_kgs:
        key = ckg.concept.key
        if key in concepts and concepts[key].display != ckg.concept.display:
            raise KareError(f"conflicting displays for concept {key}")
        concepts[key] = ckg.concept
        slot = membership.setdefault(key, set())
        for t in ckg.triples:
            slot.add(t.key)
            pool.append(t)
    return GlobalGraph(
        triples=merge_triples(pool),
        concepts=concepts,
        membership={k: frozenset(v) for k, v in membership.items()},
    )


# ---------------------------------------------------------------------------
# Per-concept triple files
# ---------------------------------------------------------------------------


def triples_to_rows(triples: Iterable[Triple]) -> list[list[str]]:
    """One row per (triple, source), deterministically ordered."""
    rows = []
    for t in sorted_triples(triples):
        for source in sorted(t.sources):
            rows.append([t.head, t.relation, t.tail, source])
    return rows


def rows_to_triples(rows: Iterable[Iterable[str]]) -> frozenset[Triple]:
    triples = []
    for row in rows:
        head, relation, tail, source = row
        triples.append(Triple.single(head, relation, tail, source))
    return merge_triples(triples)


def concept_file_name(concept: MedicalCode) -> str:
    return f"{concept.vocabulary}_{concept.code}.json"


def save_concept_kg(ckg: ConceptKG, directory: str | Path) -> Path:
    path = Path(directory) / concept_file_name(ckg.concept)
    payload = {
        "concept": {
            "vocabulary": ckg.concept.vocabulary,
            "code": ckg.concept.code,
            "display": ckg.concept.display,
        },
        "triples": triples_to_rows(ckg.triples),
    }
    path.write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=True, separators=(",", ":"))
        + "\n",
        encoding="utf-8",
    )
    return path


def load_concept_kg(path: str | Path) -> ConceptKG:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    c = payload["concept"]
    concept = MedicalCode(c["vocabulary"], c["code"], c["display"])
    return ConceptKG(concept, rows_to_triples(payload["triples"]))
