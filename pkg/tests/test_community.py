import random

import pytest

from conftest import make_gateway
from kare.cluster import RefinedGraph
from kare.community import (
    Community,
    IndexParams,
    build_index,
    communities_at,
    community_id,
    hierarchical_leiden,
    load_index,
    save_index,
    summarize_all,
    summarize_community,
    theme_key,
)
from kare.ehr import mortality_task, readmission_task
from kare.errors import IndexBuildError
from kare.gateway import DeterministicChat, EchoChat, RecordingChat, ScriptedChat
from kare.kg import Triple, merge_triples, triple_entities


def t(h, r, tl):
    return Triple.single(h, r, tl, "LLM")


def refined_from(triples):
    merged = merge_triples(triples)
    return RefinedGraph(
        triples=merged,
        nodes=triple_entities(merged),
        relations=frozenset(x.relation for x in merged),
        concept_triples={},
    )


def make_community(triples, run=1, level=0):
    merged = merge_triples(triples)
    nodes = triple_entities(merged)
    return Community(
        id=community_id(nodes),
        run=run,
        level=level,
        nodes=nodes,
        triples=merged,
        provenances=((run, level),),
    )


def chain_triples(n, prefix="e"):
    return [t(f"{prefix}{i}", "r", f"{prefix}{i + 1}") for i in range(n)]


class TestHierarchicalLeiden:
    def graph(self, rng, n_nodes=40, n_edges=80):
        nodes = [f"n{i:03d}" for i in range(n_nodes)]
        triples = set()
        while len(triples) < n_edges:
            a, b = rng.sample(nodes, 2)
            triples.add((a, "r", b))
        return refined_from([t(*x) for x in sorted(triples)])

    def test_run_one_identical_whether_or_not_more_runs_follow(self):
        graph = self.graph(random.Random(1))
        one = hierarchical_leiden(graph, runs=1, base_seed=50, max_cluster_size=5)
        two = hierarchical_leiden(graph, runs=2, base_seed=50, max_cluster_size=5)
        ids_one = {c.id for c in one}
        from_run_one = {c.id for c in two if any(r == 1 for r, _ in c.provenances)}
        assert ids_one == from_run_one

    def test_duplicate_node_sets_deduplicated_with_provenances(self):
        graph = self.graph(random.Random(2))
        found = hierarchical_leiden(graph, runs=4, base_seed=9, max_cluster_size=5)
        assert len({c.id for c in found}) == len(found)
        # Identical node sets across runs collapse: some record carries
        # provenance from more than one run (cheap structural check).
        runs_per_record = [len({r for r, _ in c.provenances}) for c in found]
        assert max(runs_per_record) >= 2

    def test_first_provenance_matches_run_level_fields(self):
        graph = self.graph(random.Random(3))
        for c in hierarchical_leiden(graph, runs=3, base_seed=4, max_cluster_size=5):
            assert c.provenances[0] == (c.run, c.level)

    def test_slices_partition_the_node_set(self):
        graph = self.graph(random.Random(4))
        found = hierarchical_leiden(graph, runs=3, base_seed=11, max_cluster_size=5)
        all_nodes = set(graph.nodes)
        levels_per_run = {}
        for c in found:
            for run, level in c.provenances:
                levels_per_run.setdefault(run, set()).add(level)
        for run, levels in levels_per_run.items():
            assert levels == set(range(max(levels) + 1))
            for level in levels:
                slice_communities = communities_at(found, run, level)
                seen = [n for c in slice_communities for n in c.nodes]
                assert sorted(seen) == sorted(all_nodes)

    def test_nodes_equal_entities_of_triples(self):
        graph = self.graph(random.Random(5))
        for c in hierarchical_leiden(graph, runs=2, base_seed=3, max_cluster_size=5):
            assert triple_entities(c.triples) == c.nodes

    def test_empty_graph_rejected(self):
        with pytest.raises(IndexBuildError):
            hierarchical_leiden(refined_from([]), runs=1, base_seed=0, max_cluster_size=5)


class TestSummarizePolicy:
    def test_single_triple_echo_summary_mentions_terms(self):
        community = make_community([t("aspirin", "reduces", "fever")])
        gateway = make_gateway(chat=EchoChat())
        summaries = summarize_community(gateway, community, seed=1)
        general = summaries["general"]
        for term in ("aspirin", "reduces", "fever"):
            assert term in general

    def test_small_community_uses_exactly_one_call_per_kind(self):
        recorder = RecordingChat(DeterministicChat(seed=0))
        gateway = make_gateway(chat=recorder)
        community = make_community(chain_triples(12))
        summarize_community(gateway, community, themes=[mortality_task()], seed=1)
        assert recorder.calls_for("summary_general") == 1
        assert recorder.calls_for("summary_theme") == 1
        assert recorder.calls_for("summary_combine") == 0

    def test_45_triples_make_three_chunks_and_one_combine(self):
        recorder = RecordingChat(DeterministicChat(seed=0))
        gateway = make_gateway(chat=recorder)
        community = make_community(chain_triples(45))
        assert len(community.triples) == 45
        summaries = summarize_community(gateway, community, chunk_triples=20, seed=1)
        assert recorder.calls_for("summary_general") == 3
        assert recorder.calls_for("summary_combine") == 1
        assert "general" in summaries

    def test_chunking_is_seeded_and_deterministic(self):
        community = make_community(chain_triples(30))
        g1 = make_gateway(chat=DeterministicChat(seed=0))
        g2 = make_gateway(chat=DeterministicChat(seed=0))
        assert summarize_community(g1, community, seed=5) == summarize_community(
            g2, community, seed=5
        )

    def test_oversized_community_rejected(self):
        community = make_community(chain_triples(160))
        gateway = make_gateway(chat=EchoChat())
        with pytest.raises(IndexBuildError):
            summarize_community(gateway, community, max_summary_triples=150)

    def test_backend_failure_leaves_community_unsummarized(self):
        gateway = make_gateway(chat=ScriptedChat([]), max_attempts=1, backoff_base=0.0)
        community = make_community([t("a", "r", "b")])
        assert summarize_community(gateway, community) is None

    def test_summarize_all_skips_oversized(self):
        small = make_community([t("a", "r", "b")])
        big = make_community(chain_triples(200, prefix="big"))
        gateway = make_gateway(chat=DeterministicChat(seed=0))
        out = summarize_all(gateway, [small, big], max_summary_triples=150)
        by_id = {c.id: c for c in out}
        assert by_id[small.id].summarized
        assert not by_id[big.id].summarized

    def test_theme_summary_stored_under_task_key(self):
        gateway = make_gateway(chat=DeterministicChat(seed=0))
        community = make_community([t("a", "r", "b")])
        summaries = summarize_community(
            gateway, community, themes=[mortality_task(), readmission_task()]
        )
        assert set(summaries) == {"general", theme_key("mortality"), theme_key("readmission")}


class TestIndex:
    def build(self, communities, gateway=None):
        gateway = gateway or make_gateway(chat=DeterministicChat(seed=0))
        summarized = summarize_all(gateway, communities)
        return build_index(summarized, gateway, IndexParams(runs=1, base_seed=0))

    def test_empty_community_list(self):
        gateway = make_gateway(chat=DeterministicChat(seed=0))
        index = build_index([], gateway, IndexParams())
        assert index.communities == [] and index.inverted == {}

    def test_node_in_three_communities_lists_exactly_those(self):
        shared = "hub"
        comms = [
            make_community([t(shared, "r", f"x{i}")], run=1, level=0) for i in range(3)
        ]
        index = self.build(comms)
        assert set(index.lookup(shared)) == {c.id for c in comms}

    def test_lookup_matches_linear_scan_oracle(self):
        rng = random.Random(12)
        comms = []
        for i in range(15):
            triples = [
                t(f"n{rng.randint(0, 20)}", "r", f"n{rng.randint(0, 20)}")
                for _ in range(rng.randint(1, 5))
            ]
            try:
                comms.append(make_community(triples, run=1, level=i))
            except Exception:
                continue
        seen = set()
        unique = []
        for c in comms:
            if c.id not in seen:
                seen.add(c.id)
                unique.append(c)
        index = self.build(unique)
        terms = {n for c in unique for n in c.nodes}
        for term in sorted(terms):
            oracle = sorted(c.id for c in unique if term in c.nodes)
            assert sorted(index.lookup(term)) == oracle

    def test_round_trip_is_lossless(self, tmp_path):
        comms = [
            make_community(chain_triples(4)),
            make_community(chain_triples(30, prefix="q")),
        ]
        gateway = make_gateway(chat=DeterministicChat(seed=0))
        summarized = summarize_all(gateway, comms)
        index = build_index(summarized, gateway, IndexParams(runs=2, base_seed=7))
        save_index(index, tmp_path / "index")
        loaded = load_index(tmp_path / "index")
        assert [c.id for c in loaded.communities] == sorted(c.id for c in index.communities)
        by_id = {c.id: c for c in index.communities}
        for c in loaded.communities:
            assert c == by_id[c.id]
        assert loaded.inverted == index.inverted
        assert loaded.params == index.params
        for key, vec in index.summary_embeddings.items():
            assert (loaded.summary_embeddings[key] == vec).all()
        for key, vec in index.node_embeddings.items():
            assert (loaded.node_embeddings[key] == vec).all()

    def test_identical_inputs_give_identical_index_content_hash(self, tmp_path):
        import hashlib

        def build_and_hash(out_dir):
            gateway = make_gateway(chat=DeterministicChat(seed=4))
            graph = TestHierarchicalLeiden().graph(random.Random(6), 25, 50)
            found = hierarchical_leiden(graph, runs=2, base_seed=8, max_cluster_size=5)
            summarized = summarize_all(gateway, found, seed=3)
            index = build_index(summarized, gateway, IndexParams(runs=2, base_seed=8))
            save_index(index, out_dir)
            digest = hashlib.sha256()
            for path in sorted(out_dir.glob("*")):
                digest.update(path.name.encode())
                digest.update(path.read_bytes())
            return digest.hexdigest()

        assert build_and_hash(tmp_path / "a") == build_and_hash(tmp_path / "b")

    def test_duplicate_ids_rejected(self):
        c = make_community([t("a", "r", "b")])
        gateway = make_gateway(chat=DeterministicChat(seed=0))
        with pytest.raises(IndexBuildError, match="dedup"):
            build_index([c, c], gateway, IndexParams())

    def test_missing_summary_embedding_detected_on_load(self, tmp_path):
        comms = [make_community([t("a", "r", "b")])]
        gateway = make_gateway(chat=DeterministicChat(seed=0))
        index = build_index(summarize_all(gateway, comms), gateway, IndexParams())
        save_index(index, tmp_path / "index")
        # Corrupt: drop the summary embedding rows.
        import json

        meta_path = tmp_path / "index" / "meta.json"
        meta = json.loads(meta_path.read_text())
        meta["summary_rows"] = []
        meta_path.write_text(json.dumps(meta))
        from kare.store import write_embedding_matrix
        import numpy as np

        write_embedding_matrix(tmp_path / "index" / "summaries.emb", np.zeros((0, 32), dtype=np.float32))
        with pytest.raises(IndexBuildError, match="missing summary embedding"):
            load_index(tmp_path / "index")
