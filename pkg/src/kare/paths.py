"""External biomedical graph and bounded bidirectional shortest-path search.

Edges are traversed undirected; relation labels keep their original
orientation and multiplicity so that path extraction can reproduce the
source triples exactly.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .errors import GraphLookupError, KareError


class ExternalGraph:
    """Immutable entity graph with relation-labeled, undirected-traversable
    edges. Node names are unique exact strings."""

    def __init__(self, edges: list[tuple[str, str, str]]):
        adjacency: dict[str, set[str]] = {}
        labels: dict[tuple[str, str], set[str]] = {}
        edge_pairs: set[frozenset[str]] = set()
        for head, relation, tail in edges:
            head, relation, tail = head.strip(), relation.strip(), tail.strip()
            if not head or not relation or not tail:
                raise KareError("graph edges need nonempty head, relation, tail")
            if head == tail:
                continue  # self-loops dropped at load
            adjacency.setdefault(head, set()).add(tail)
            adjacency.setdefault(tail, set()).add(head)
            labels.setdefault((head, tail), set()).add(relation)
            edge_pairs.add(frozenset((head, tail)))
        self._adjacency = {n: tuple(sorted(nbrs)) for n, nbrs in adjacency.items()}
        self._labels = {k: tuple(sorted(v)) for k, v in labels.items()}
        self._lower: dict[str, str] = {}
        for name in sorted(self._adjacency):
            self._lower.setdefault(name.lower(), name)
        self.node_count = len(self._adjacency)
        self.edge_count = len(edge_pairs)

    @classmethod
    def from_tsv(cls, path: str | Path) -> "ExternalGraph":
        edges = []
        with open(path, "r", encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                line = line.rstrip("\n")
                if not line.strip():
                    continue
                parts = line.split("\t")
                if len(parts) != 3:
                    raise KareError(f"{path}: line {lineno}: expected 3 tab-separated fields")
                edges.append((parts[0], parts[1], parts[2]))
        return cls(edges)

    def __contains__(self, name: str) -> bool:
        return name in self._adjacency

    def neighbors(self, name: str) -> tuple[str, ...]:
        return self._adjacency.get(name, ())

    def resolve(self, display_name: str) -> str | None:
        """Exact case-insensitive match of a display name to a node name."""
        return self._lower.get(display_name.strip().lower())

    def relations_between(self, a: str, b: str) -> list[tuple[str, str, str]]:
        """All labeled edges connecting a and b, in original orientation."""
        out = []
        for rel in self._labels.get((a, b), ()):
            out.append((a, rel, b))
        for rel in self._labels.get((b, a), ()):
            out.append((b, rel, a))
        return out


@dataclass(frozen=True)
class PathSearchParams:
    max_length: int = 7
    max_paths: int = 40
    max_nodes: int = 12000


def bidirectional_shortest_paths(
    graph: ExternalGraph,
    source: str,
    target: str,
    max_length: int = 7,
    max_paths: int = 40,
    max_nodes: int = 12000,
) -> list[tuple[str, ...]]:
    """All (up to ``max_paths``) shortest simple paths between two nodes,
    discovered by a two-frontier breadth-first search.

    Returns an empty list when the endpoints are disconnected, when their
    distance exceeds ``max_length``, or when the node budget runs out before
    the frontiers meet. Raises for endpoints missing from the graph.
    """
    if source == target:
        raise KareError("path search requires distinct endpoints")
    if source not in graph:
        raise GraphLookupError(f"node not in graph: {source!r}")
    if target not in graph:
        raise GraphLookupError(f"node not in graph: {target!r}")
    if max_length < 1 or max_paths < 1:
        return []

    # Levelwise BFS state per side: distance map, shortest-path parent DAG,
    # and the frontier of the most recently completed level.
    dist_f: dict[str, int] = {source: 0}
    dist_b: dict[str, int] = {target: 0}
    parents_f: dict[str, list[str]] = {source: []}
    parents_b: dict[str, list[str]] = {target: []}
    frontier_f = [source]
    frontier_b = [target]
    depth_f = depth_b = 0
    budget_hit = False

    def expand(frontier, dist, parents, other_dist):
        nonlocal budget_hit
        next_level: list[str] = []
        level = dist[frontier[0]] + 1
        for node in frontier:
            for nbr in graph.neighbors(node):
                if nbr in dist:
                    if dist[nbr] == level:
                        parents[nbr].append(node)
                    continue
                if len(dist_f) + len(dist_b) >= max_nodes:
                    budget_hit = True
                    return []
                dist[nbr] = level
                parents[nbr] = [node]
                next_level.append(nbr)
        return next_level

    def meeting_distance() -> int | None:
        best = None
        smaller, other = (dist_f, dist_b) if len(dist_f) <= len(dist_b) else (dist_b, dist_f)
        for node, d in smaller.items():
            if node in other:
                total = d + other[node]
                if best is None or total < best:
                    best = total
        return best

    # The frontiers cannot meet before the ball radii cover the distance, so
    # expanding one full level at a time and checking afterwards is exact.
    while meeting_distance() is None:
        if not frontier_f or not frontier_b or depth_f + depth_b >= max_length:
            return []
        if len(frontier_f) <= len(frontier_b):
            frontier_f = expand(frontier_f, dist_f, parents_f, dist_b)
            depth_f += 1
        else:
            frontier_b = expand(frontier_b, dist_b, parents_b, dist_f)
            depth_b += 1
        if budget_hit:
            return []

    distance = meeting_distance()
    if distance is None or distance > max_length:
        return []

    meets = sorted(
        n for n in (set(dist_f) & set(dist_b)) if dist_f[n] + dist_b[n] == distance
    )

    def stems(node: str, parents: dict[str, list[str]]) -> list[tuple[str, ...]]:
        if not parents[node]:
            return [(node,)]
        out = []
        for parent in sorted(parents[node]):
            for stem in stems(parent, parents):
                out.append(stem + (node,))
        return out

    paths: list[tuple[str, ...]] = []
    seen: set[tuple[str, ...]] = set()
    for meet in meets:
        for left in stems(meet, parents_f):
            for right in stems(meet, parents_b):
                path = left + tuple(reversed(right))[1:]
                if path not in seen:
                    seen.add(path)
                    paths.append(path)
                    if len(paths) >= max_paths:
                        return sorted(paths)
    return sorted(paths)
