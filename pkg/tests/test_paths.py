import random

import networkx as nx
import pytest

from kare.errors import GraphLookupError, KareError
from kare.paths import ExternalGraph, bidirectional_shortest_paths


def build(edges):
    return ExternalGraph([(h, "rel", t) for h, t in edges])


def random_graph_edges(rng, n_nodes, n_edges):
    nodes = [f"n{i}" for i in range(n_nodes)]
    edges = set()
    while len(edges) < n_edges:
        a, b = rng.sample(nodes, 2)
        edges.add((min(a, b), max(a, b)))
    return nodes, sorted(edges)


def nx_graph(nodes, edges):
    g = nx.Graph()
    g.add_nodes_from(nodes)
    g.add_edges_from(edges)
    return g


class TestExternalGraph:
    def test_tsv_load_and_counts(self, tmp_path):
        path = tmp_path / "kg.tsv"
        path.write_text("a\tr1\tb\nb\tr2\tc\na\tr3\ta\n")
        g = ExternalGraph.from_tsv(path)
        assert g.node_count == 3  # self-loop dropped but node kept via other edges
        assert g.edge_count == 2
        assert "a" in g and g.neighbors("a") == ("b",)

    def test_malformed_tsv_line_reports_number(self, tmp_path):
        path = tmp_path / "kg.tsv"
        path.write_text("a\tr\tb\nbad line\n")
        with pytest.raises(KareError, match="line 2"):
            ExternalGraph.from_tsv(path)

    def test_resolve_is_case_insensitive(self):
        g = build([("Heart Failure", "edema")])
        assert g.resolve("heart failure") == "Heart Failure"
        assert g.resolve("unknown") is None

    def test_relations_keep_orientation_and_multiplicity(self):
        g = ExternalGraph([("a", "r1", "b"), ("b", "r2", "a"), ("a", "r3", "b")])
        found = set(g.relations_between("b", "a"))
        assert found == {("a", "r1", "b"), ("a", "r3", "b"), ("b", "r2", "a")}


class TestBidirectionalSearch:
    def test_adjacent_nodes_give_single_edge_path(self):
        g = build([("s", "t"), ("s", "x"), ("x", "t")])
        assert bidirectional_shortest_paths(g, "s", "t") == [("s", "t")]

    def test_disconnected_pair_gives_empty(self):
        g = build([("s", "a"), ("t", "b")])
        assert bidirectional_shortest_paths(g, "s", "t") == []

    def test_missing_endpoint_raises(self):
        g = build([("s", "a")])
        with pytest.raises(GraphLookupError):
            bidirectional_shortest_paths(g, "s", "zz")

    def test_same_endpoints_rejected(self):
        g = build([("s", "a")])
        with pytest.raises(KareError):
            bidirectional_shortest_paths(g, "s", "s")

    def test_all_shortest_paths_on_diamond(self):
        g = build([("s", "a"), ("s", "b"), ("a", "t"), ("b", "t")])
        paths = bidirectional_shortest_paths(g, "s", "t")
        assert paths == [("s", "a", "t"), ("s", "b", "t")]

    def test_max_paths_cap(self):
        edges = [("s", f"m{i}") for i in range(8)] + [(f"m{i}", "t") for i in range(8)]
        g = build(edges)
        paths = bidirectional_shortest_paths(g, "s", "t", max_paths=3)
        assert len(paths) == 3
        assert all(len(p) == 3 for p in paths)

    def test_max_length_cuts_off(self):
        g = build([("a", "b"), ("b", "c"), ("c", "d")])
        assert bidirectional_shortest_paths(g, "a", "d", max_length=2) == []
        assert bidirectional_shortest_paths(g, "a", "d", max_length=3) == [("a", "b", "c", "d")]

    def test_node_budget_exhaustion_degrades_to_empty(self):
        rng = random.Random(0)
        nodes, edges = random_graph_edges(rng, 60, 120)
        g = build(edges)
        s, t = "n0", "n59"
        assert bidirectional_shortest_paths(g, s, t, max_nodes=3) == []

    def test_matches_bfs_oracle_on_random_graphs(self):
        rng = random.Random(1234)
        for trial in range(30):
            n = rng.randint(8, 60)
            m = rng.randint(n - 1, min(3 * n, n * (n - 1) // 2))
            nodes, edges = random_graph_edges(rng, n, m)
            g = build(edges)
            oracle = nx_graph(nodes, edges)
            max_length = rng.randint(1, 7)
            present = sorted({x for e in edges for x in e})
            for _ in range(10):
                s, t = rng.sample(present, 2)
                paths = bidirectional_shortest_paths(g, s, t, max_length=max_length)
                try:
                    distance = nx.shortest_path_length(oracle, s, t)
                except nx.NetworkXNoPath:
                    distance = None
                if distance is None or distance > max_length:
                    assert paths == []
                else:
                    assert paths, f"missed path {s}->{t} at distance {distance}"
                    assert all(len(p) - 1 == distance for p in paths)
                    for p in paths:
                        assert p[0] == s and p[-1] == t
                        assert len(set(p)) == len(p)  # simple
                        for a, b in zip(p, p[1:]):
                            assert oracle.has_edge(a, b)

    def test_path_sets_are_complete_when_under_cap(self):
        rng = random.Random(7)
        for _ in range(10):
            nodes, edges = random_graph_edges(rng, 20, 40)
            g = build(edges)
            oracle = nx_graph(nodes, edges)
            present = sorted({x for e in edges for x in e})
            s, t = rng.sample(present, 2)
            found = set(bidirectional_shortest_paths(g, s, t, max_paths=10_000))
            expected = {
                tuple(p) for p in nx.all_shortest_paths(oracle, s, t)
            } if nx.has_path(oracle, s, t) and nx.shortest_path_length(oracle, s, t) <= 7 else set()
            assert found == expected
