"""Seeded Leiden-style modularity clustering over weighted triple graphs.

The partitioner follows the queue-based local move / refine / aggregate
scheme, then applies two closing passes on the flat partition:

* stranded-node cleanup: every node ends up with at least one intra-block
  edge (or a self-loop), so a block's node set always equals the entity set
  of its induced triples;
* a merge pass that runs until no adjacent pair of blocks can be merged with
  a modularity gain, which guarantees the final modularity is at least that
  of the one-block partition (and the improving moves guarantee it beats the
  all-singletons partition).

Randomness (visit order, tie-breaking, refinement choices) is driven entirely
by the caller's seeded ``random.Random``, so repeated runs with different
seeds explore diverse structures while each run stays reproducible.
"""

from __future__ import annotations

import random
from collections import defaultdict, deque
from dataclasses import dataclass
from typing import Iterable, Sequence

from .kg import Triple


@dataclass
class ClusterGraph:
    """Undirected weighted simple graph; parallel triples collapse into edge
    weights and (v, r, v) triples into self-loop weights."""

    nodes: tuple[str, ...]
    adj: tuple[dict[int, float], ...]
    self_loops: tuple[float, ...]
    degrees: tuple[float, ...]
    total_weight: float

    @property
    def n(self) -> int:
        return len(self.nodes)

    @classmethod
    def from_triples(cls, triples: Iterable[Triple]) -> "ClusterGraph":
        weights: dict[tuple[str, str], float] = defaultdict(float)
        loops: dict[str, float] = defaultdict(float)
        names: set[str] = set()
        # Sorted iteration keeps adjacency insertion order (and with it the
        # optimizer's visit order) independent of set hash randomization.
        for t in sorted(triples, key=lambda x: x.key):
            names.add(t.head)
            names.add(t.tail)
            if t.head == t.tail:
                loops[t.head] += 1.0
            else:
                a, b = sorted((t.head, t.tail))
                weights[(a, b)] += 1.0
        nodes = tuple(sorted(names))
        index = {name: i for i, name in enumerate(nodes)}
        adj: list[dict[int, float]] = [dict() for _ in nodes]
        for (a, b), w in weights.items():
            adj[index[a]][index[b]] = w
            adj[index[b]][index[a]] = w
        self_loops = tuple(loops.get(name, 0.0) for name in nodes)
        degrees = tuple(
            sum(adj[i].values()) + 2.0 * self_loops[i] for i in range(len(nodes))
        )
        total = sum(weights.values()) + sum(loops.values())
        return cls(nodes, tuple(adj), self_loops, degrees, total)

    def subgraph(self, members: Iterable[str]) -> "ClusterGraph":
        keep = set(members)
        nodes = tuple(sorted(keep))
        index = {name: i for i, name in enumerate(nodes)}
        old = {name: i for i, name in enumerate(self.nodes)}
        adj: list[dict[int, float]] = [dict() for _ in nodes]
        for name in nodes:
            i = index[name]
            for j_old, w in self.adj[old[name]].items():
                other = self.nodes[j_old]
                if other in keep:
                    adj[i][index[other]] = w
        loops = tuple(self.self_loops[old[name]] for name in nodes)
        total = sum(w for i in range(len(nodes)) for j, w in adj[i].items() if j > i)
        total += sum(loops)
        degrees = tuple(sum(adj[i].values()) + 2.0 * loops[i] for i in range(len(nodes)))
        return ClusterGraph(nodes, tuple(adj), loops, degrees, total)


def modularity(graph: ClusterGraph, blocks: Sequence[Iterable[str]]) -> float:
    """Standard weighted modularity at resolution 1; self-loops count once in
    the total weight and twice in their node's degree."""
    if graph.total_weight <= 0:
        return 0.0
    index = {name: i for i, name in enumerate(graph.nodes)}
    membership = {}
    for b, block in enumerate(blocks):
        for name in block:
            membership[index[name]] = b
    m = graph.total_weight
    intra = defaultdict(float)
    degree_sum = defaultdict(float)
    for i in range(graph.n):
        c = membership[i]
        degree_sum[c] += graph.degrees[i]
        intra[c] += graph.self_loops[i]
        for j, w in graph.adj[i].items():
            if j > i and membership[j] == c:
                intra[c] += w
    return sum(
        intra[c] / m - (degree_sum[c] / (2.0 * m)) ** 2 for c in degree_sum
    )


# ---------------------------------------------------------------------------
# Core partitioner (operates on integer node ids of a working graph)
# ---------------------------------------------------------------------------


class _Working:
    """Mutable aggregate-level view used during optimization."""

    def __init__(self, adj, loops, degrees, total):
        self.adj = adj  # list[dict[int, float]]
        self.loops = loops
        self.degrees = degrees
        self.m = total
        self.n = len(adj)


def _local_move(work: _Working, membership: list[int], tot: dict[int, float],
                rng: random.Random) -> bool:
    """Queue-based single-node moves; each applied move strictly increases
    modularity. Returns whether anything moved."""
    order = list(range(work.n))
    rng.shuffle(order)
    queue = deque(order)
    queued = [True] * work.n
    moved_any = False
    guard = 0
    limit = 200 * max(1, work.n) * max(1, work.n)
    two_m_sq = 2.0 * work.m * work.m
    next_community = max(membership, default=-1) + 1
    while queue:
        guard += 1
        if guard > limit:  # float-tie safety valve; never hit in practice
            break
        v = queue.popleft()
        queued[v] = False
        c_old = membership[v]
        k_v = work.degrees[v]
        link: dict[int, float] = defaultdict(float)
        for u, w in work.adj[v].items():
            link[membership[u]] += w
        tot[c_old] -= k_v
        stay_gain = link.get(c_old, 0.0) / work.m - k_v * tot[c_old] / two_m_sq
        best_gain = stay_gain
        best: list[int] = []
        for c in sorted(link):
            if c == c_old:
                continue
            gain = link[c] / work.m - k_v * tot[c] / two_m_sq
            if gain > best_gain:
                best_gain = gain
                best = [c]
            elif best and gain == best_gain:
                best.append(c)
        if 0.0 > best_gain:  # moving out to a fresh singleton community
            best_gain = 0.0
            best = [next_community]
        if not best:
            tot[c_old] += k_v
            continue
        c_new = best[0] if len(best) == 1 else rng.choice(best)
        if c_new == next_community:
            next_community += 1
        membership[v] = c_new
        tot[c_new] = tot.get(c_new, 0.0) + k_v
        moved_any = True
        for u in work.adj[v]:
            if membership[u] != c_new and not queued[u]:
                queue.append(u)
                queued[u] = True
    return moved_any


def _refine(work: _Working, membership: list[int], rng: random.Random) -> list[int]:
    """Within each community, merge singleton nodes into positive-gain
    sub-communities; the randomized choice among improving targets is what
    diversifies the hierarchy across runs."""
    refined = list(range(work.n))
    rtot = list(work.degrees)
    rsize = [1] * work.n
    order = list(range(work.n))
    rng.shuffle(order)
    two_m_sq = 2.0 * work.m * work.m
    for v in order:
        if rsize[refined[v]] != 1:
            continue
        link: dict[int, float] = defaultdict(float)
        for u, w in work.adj[v].items():
            if membership[u] == membership[v]:
                link[refined[u]] += w
        k_v = work.degrees[v]
        rtot[refined[v]] -= k_v
        options = []
        for r in sorted(link):
            if r == refined[v]:
                continue
            if link[r] / work.m - k_v * rtot[r] / two_m_sq > 0.0:
                options.append(r)
        if not options:
            rtot[refined[v]] += k_v
            continue
        target = options[0] if len(options) == 1 else rng.choice(options)
        old = refined[v]
        refined[v] = target
        rsize[old] -= 1
        rsize[target] += 1
        rtot[target] += k_v
    return refined


def _aggregate(work: _Working, refined: list[int], membership: list[int]):
    """Collapse refined communities into aggregate nodes; the previous
    membership seeds the next round's starting partition."""
    ids = sorted(set(refined))
    remap = {c: i for i, c in enumerate(ids)}
    n2 = len(ids)
    adj2: list[dict[int, float]] = [dict() for _ in range(n2)]
    loops2 = [0.0] * n2
    members: list[list[int]] = [[] for _ in range(n2)]
    for v in range(work.n):
        members[remap[refined[v]]].append(v)
    for v in range(work.n):
        a = remap[refined[v]]
        loops2[a] += work.loops[v]
        for u, w in work.adj[v].items():
            if u <= v:
                continue
            b = remap[refined[u]]
            if a == b:
                loops2[a] += w
            else:
                adj2[a][b] = adj2[a].get(b, 0.0) + w
                adj2[b][a] = adj2[b].get(a, 0.0) + w
    degrees2 = [sum(adj2[i].values()) + 2.0 * loops2[i] for i in range(n2)]
    membership2 = [membership[members[i][0]] for i in range(n2)]
    work2 = _Working(adj2, loops2, degrees2, work.m)
    return work2, membership2, members


def _strand_cleanup(work: _Working, membership: list[int], tot: dict[int, float]) -> None:
    """Move any node with no intra-block edge (and no self-loop) into its best
    adjacent block, so every block is covered by its induced triples."""
    two_m_sq = 2.0 * work.m * work.m
    for v in range(work.n):
        if work.loops[v] > 0 or not work.adj[v]:
            continue
        c_v = membership[v]
        if any(membership[u] == c_v for u in work.adj[v]):
            continue
        link: dict[int, float] = defaultdict(float)
        for u, w in work.adj[v].items():
            link[membership[u]] += w
        k_v = work.degrees[v]
        tot[c_v] -= k_v
        best = max(
            sorted(link), key=lambda c: link[c] / work.m - k_v * tot[c] / two_m_sq
        )
        membership[v] = best
        tot[best] += k_v


def _merge_pass(work: _Working, membership: list[int]) -> None:
    """Greedily merge adjacent blocks while any merge improves modularity."""
    two_m_sq = 2.0 * work.m * work.m
    tot: dict[int, float] = defaultdict(float)
    between: dict[tuple[int, int], float] = defaultdict(float)
    for v in range(work.n):
        tot[membership[v]] += work.degrees[v]
        for u, w in work.adj[v].items():
            if u > v and membership[u] != membership[v]:
                key = tuple(sorted((membership[v], membership[u])))
                between[key] += w
    while True:
        best_key = None
        best_gain = 0.0
        for key in sorted(between):
            a, b = key
            gain = between[key] / work.m - tot[a] * tot[b] / two_m_sq
            if gain > best_gain:
                best_gain = gain
                best_key = key
        if best_key is None:
            return
        a, b = best_key
        for v in range(work.n):
            if membership[v] == b:
                membership[v] = a
        tot[a] += tot.pop(b)
        merged: dict[tuple[int, int], float] = defaultdict(float)
        for (x, y), w in between.items():
            x = a if x == b else x
            y = a if y == b else y
            if x != y:
                merged[tuple(sorted((x, y)))] += w
        between = merged


def leiden_partition(graph: ClusterGraph, rng: random.Random) -> list[frozenset[str]]:
    """One seeded partition of the graph, returned as node-name blocks sorted
    by their smallest member."""
    if graph.n == 0:
        return []
    if graph.total_weight <= 0:
        return [frozenset({name}) for name in graph.nodes]

    work = _Working(
        [dict(d) for d in graph.adj],
        list(graph.self_loops),
        list(graph.degrees),
        graph.total_weight,
    )
    carriers: list[list[int]] = [[i] for i in range(graph.n)]  # original ids per node
    membership = list(range(work.n))

    while True:
        tot: dict[int, float] = defaultdict(float)
        for v in range(work.n):
            tot[membership[v]] += work.degrees[v]
        _local_move(work, membership, tot, rng)
        n_comms = len(set(membership))
        if n_comms == work.n:
            break
        refined = _refine(work, membership, rng)
        if len(set(refined)) == work.n:
            refined = list(membership)  # refinement idle: aggregate on the partition
        work, membership, members = _aggregate(work, refined, membership)
        carriers = [
            [orig for v in group for orig in carriers[v]] for group in members
        ]

    # Flatten to a partition of the original nodes.
    flat = [0] * graph.n
    for v in range(work.n):
        for orig in carriers[v]:
            flat[orig] = membership[v]

    base = _Working(
        [dict(d) for d in graph.adj],
        list(graph.self_loops),
        list(graph.degrees),
        graph.total_weight,
    )
    tot = defaultdict(float)
    for v in range(base.n):
        tot[flat[v]] += base.degrees[v]
    _strand_cleanup(base, flat, tot)
    _merge_pass(base, flat)

    blocks: dict[int, set[str]] = defaultdict(set)
    for v, c in enumerate(flat):
        blocks[c].add(graph.nodes[v])
    return sorted((frozenset(b) for b in blocks.values()), key=lambda b: min(b))


def hierarchical_levels(
    graph: ClusterGraph,
    rng: random.Random,
    max_cluster_size: int,
) -> list[list[frozenset[str]]]:
    """Level 0 is a plain seeded partition; each further level re-clusters
    every block whose node count exceeds ``max_cluster_size``, carrying the
    small blocks down unchanged. Blocks that refuse to split are left as is.
    """
    levels = [leiden_partition(graph, rng)]
    frozen: set[frozenset[str]] = set()
    while True:
        nxt: list[frozenset[str]] = []
        progressed = False
        for block in sorted(levels[-1], key=min):
            if len(block) <= max_cluster_size or block in frozen:
                nxt.append(block)
                continue
            pieces = leiden_partition(graph.subgraph(block), rng)
            if len(pieces) <= 1:
                frozen.add(block)
                nxt.append(block)
                continue
            progressed = True
            nxt.extend(pieces)
        if not progressed:
            return levels
        levels.append(sorted(nxt, key=min))
