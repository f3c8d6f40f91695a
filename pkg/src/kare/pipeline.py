"""End-to-end orchestration: build-kg -> cluster -> index -> augment ->
gen-train -> emit -> evaluate, each stage resumable from persisted outputs and
recorded in a content-hashed manifest.

A single global seed fans out to per-stage seeds; with the deterministic mock
backends the whole run is a pure function of (inputs, config, seed).
"""

from __future__ import annotations

import hashlib
import json
import logging
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np

from . import cluster as clustering
from . import community as communities
from . import extract, retrieval
from .config import PipelineConfig
from .ehr import (
    PatientRecord,
    TaskSpec,
    generate_synthetic_cohort,
    load_cohort,
    load_vocabularies,
    mortality_task,
    observation_window,
    readmission_task,
    save_cohort,
    save_vocabularies,
    synthetic_vocabularies,
)
from .errors import ConfigurationError, KareError, PipelineError
from .gateway import (
    DeterministicChat,
    EchoChat,
    Gateway,
    HttpChat,
    HttpEmbedding,
    MockEmbedding,
    ResponseCache,
)
from .kg import (
    ConceptKG,
    load_concept_kg,
    merge_concept_kgs,
    rows_to_triples,
    save_concept_kg,
    triples_to_rows,
    union_global,
)
from .metrics import compute_metrics
from .kg import triple_entities
from .paths import ExternalGraph, PathSearchParams
from .samples import (
    FinetuneSample,
    build_finetune_pair,
    emit_finetune_dataset,
    generate_training_samples,
)
from .store import (
    CorpusStore,
    Document,
    canonical_json,
    read_jsonl,
    write_embedding_matrix,
    write_jsonl,
)

logger = logging.getLogger(__name__)

MANIFEST_SCHEMA_VERSION = 1
STAGES = ("build-kg", "cluster", "index", "augment", "gen-train", "emit", "evaluate")


def stage_seed(global_seed: int, stage: str) -> int:
    digest = hashlib.sha256(f"{global_seed}:{stage}".encode("utf-8")).digest()
    return int.from_bytes(digest[:6], "big")


def file_sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 16), b""):
            h.update(block)
    return h.hexdigest()


def build_gateway(config: PipelineConfig, artifacts: Path) -> Gateway:
    b = config.backends
    if b.chat == "mock":
        chat = DeterministicChat(seed=config.seed)
    elif b.chat == "echo":
        chat = EchoChat()
    elif b.chat == "http":
        import os

        chat = HttpChat(os.environ["LLM_BASE_URL"], os.environ.get("LLM_API_KEY", ""))
    else:
        raise PipelineError(f"unknown chat backend {b.chat!r}")
    if b.embed == "mock":
        embed = MockEmbedding(dimension=b.embed_dim, seed=config.seed)
    elif b.embed == "http":
        import os

        embed = HttpEmbedding(
            os.environ["EMBED_BASE_URL"], os.environ.get("EMBED_API_KEY", ""),
            dimension=b.embed_dim,
        )
    else:
        raise PipelineError(f"unknown embedding backend {b.embed!r}")
    cache_dir = b.cache_dir if b.cache_dir is not None else artifacts / "cache"
    return Gateway(
        chat,
        embed,
        cache=ResponseCache(cache_dir),
        max_in_flight=b.max_in_flight,
        max_attempts=b.max_attempts,
        backoff_base=b.backoff_base,
    )


def enabled_tasks(config: PipelineConfig) -> list[TaskSpec]:
    tasks = []
    for task_id in config.tasks.enabled:
        if task_id == "mortality":
            tasks.append(mortality_task())
        elif task_id == "readmission":
            tasks.append(readmission_task(config.tasks.readmission_window_days))
        else:
            raise PipelineError(f"unknown task {task_id!r} in config")
    return tasks


@dataclass
class StageContext:
    config: PipelineConfig
    artifacts: Path
    gateway: Gateway
    seed: int


# ---------------------------------------------------------------------------
# Synthetic inputs (cohort, vocabularies, external KG, corpus)
# ---------------------------------------------------------------------------

_BIO_RELATIONS = ("interacts with", "regulates", "associated with", "subtype of")


def synth_inputs(config: PipelineConfig) -> dict[str, Path]:
    """Generate every file-based input the pipeline ingests: the cohort, the
    code vocabularies, a planted external bio-KG over the concept displays,
    and an embedded document corpus mentioning them."""
    artifacts = Path(config.artifacts_dir)
    inputs_dir = artifacts / "inputs"
    inputs_dir.mkdir(parents=True, exist_ok=True)
    seed = stage_seed(config.seed, "synth")
    rng = random.Random(seed)

    vocab = synthetic_vocabularies(config.synth.vocab_sizes)
    records = generate_synthetic_cohort(
        seed=seed,
        n_patients=config.synth.n_patients,
        vocab_sizes=config.synth.vocab_sizes,
        positive_rate=config.synth.positive_rate,
        readmission_window=config.tasks.readmission_window_days,
    )
    cohort_path = Path(config.cohort)
    cohort_path.parent.mkdir(parents=True, exist_ok=True)
    save_cohort(records, cohort_path)
    save_vocabularies(vocab, config.vocabularies)

    displays = sorted(d for family in vocab.values() for d in family.values())
    mediators = [f"bio process {i:02d}" for i in range(1, max(9, len(displays) // 3) + 1)]
    edges: list[tuple[str, str, str]] = []
    for i, display in enumerate(displays):
        mediator = mediators[i % len(mediators)]
        edges.append((display, rng.choice(_BIO_RELATIONS), mediator))
    for a, b in zip(mediators, mediators[1:]):
        edges.append((a, "feeds into", b))
    pool = displays + mediators
    for _ in range(config.synth.biokg_extra_edges):
        a, b = rng.sample(pool, 2)
        edges.append((a, rng.choice(_BIO_RELATIONS), b))
    biokg_path = Path(config.biokg)
    with open(biokg_path, "w", encoding="utf-8", newline="\n") as fh:
        for head, rel, tail in edges:
            fh.write(f"{head}\t{rel}\t{tail}\n")

    docs = []
    for i in range(config.synth.corpus_docs):
        mentioned = rng.sample(displays, k=min(len(displays), rng.randint(2, 4)))
        text = (
            f"Study {i:03d}: patients presenting with {mentioned[0]} were often "
            f"co-managed for {', '.join(mentioned[1:])}. Outcomes varied with "
            f"severity and follow-up adherence."
        )
        docs.append(Document(f"doc-{i:04d}", text))
    gateway = build_gateway(config, artifacts)
    matrix = gateway.embed([d.text for d in docs])
    CorpusStore.save(docs, matrix, config.corpus, config.corpus_embeddings)
    return {
        "cohort": cohort_path,
        "vocabularies": Path(config.vocabularies),
        "biokg": biokg_path,
        "corpus": Path(config.corpus),
        "corpus_embeddings": Path(config.corpus_embeddings),
    }


# ---------------------------------------------------------------------------
# Stage implementations
# ---------------------------------------------------------------------------


def _load_cohort(ctx: StageContext) -> list[PatientRecord]:
    vocab = load_vocabularies(ctx.config.vocabularies)
    return load_cohort(ctx.config.cohort, vocabularies=vocab)


def _concepts_dir(ctx: StageContext) -> Path:
    return ctx.artifacts / "kg" / "concepts"


def stage_build_kg(ctx: StageContext) -> list[Path]:
    cohort = _load_cohort(ctx)
    graph = ExternalGraph.from_tsv(ctx.config.biokg)
    corpus = CorpusStore.load(ctx.config.corpus, ctx.config.corpus_embeddings)
    kg_cfg = ctx.config.kg
    table = extract.collect_cooccurrence(cohort, kg_cfg.cooccur_top_x)
    concepts = {key: table.concepts[key] for key in sorted(table.concepts)}

    path_params = PathSearchParams(
        max_length=kg_cfg.path_max_length,
        max_paths=kg_cfg.path_max_paths,
        max_nodes=kg_cfg.path_max_nodes,
    )
    parts: dict[tuple[str, str], list[ConceptKG]] = {key: [] for key in concepts}
    for key, concept in concepts.items():
        related = [code for code, _ in table.related(concept)]
        parts[key].append(
            extract.extract_kg_subgraph(graph, concept, related, path_params)
        )

    visit_sets = []
    for record in cohort:
        for visit in record.visits:
            codes = {c.key: c for c in visit.all_codes()}
            visit_sets.append(codes)
    filtered = extract.filter_concept_sets(
        [frozenset(s) for s in visit_sets], kg_cfg.set_filter_threshold
    )
    kept_keys = set()
    concept_sets = []
    for keys in filtered:
        if keys in kept_keys:
            continue
        kept_keys.add(keys)
        concept_sets.append(sorted(keys))

    for keys in concept_sets:
        codes = [concepts[k] for k in keys]
        docs = extract.retrieve_documents(
            ctx.gateway, corpus, (c.display for c in codes), kg_cfg.top_documents
        )
        for doc in docs:
            triples = extract.extract_triples_from_text(ctx.gateway, doc.text, codes)
            if not triples:
                continue
            lowered = doc.text.lower()
            recipients = [c for c in codes if c.display.lower() in lowered] or codes
            for concept in recipients:
                parts[concept.key].append(ConceptKG(concept, frozenset(triples)))
        llm_graphs = extract.extract_triples_from_llm(ctx.gateway, codes)
        for key, ckg in llm_graphs.items():
            parts[key].append(ckg)

    out_dir = _concepts_dir(ctx)
    out_dir.mkdir(parents=True, exist_ok=True)
    outputs = []
    for key in sorted(parts):
        merged = merge_concept_kgs(parts[key])
        outputs.append(save_concept_kg(merged, out_dir))
    return outputs


def _load_concept_kgs(ctx: StageContext) -> list[ConceptKG]:
    out_dir = _concepts_dir(ctx)
    files = sorted(out_dir.glob("*.json"))
    if not files:
        raise PipelineError("no concept KG files found; run build-kg first")
    return [load_concept_kg(p) for p in files]


def stage_cluster(ctx: StageContext) -> list[Path]:
    global_graph = union_global(_load_concept_kgs(ctx))
    entities = sorted(global_graph.entities())
    relations = sorted(global_graph.relations())
    if not entities:
        raise PipelineError("global graph is empty")
    cfg = ctx.config.cluster
    grid = list(cfg.threshold_grid)

    def choose(terms: list[str]) -> tuple[float, list[list[str]]]:
        sample = clustering.sample_terms(terms, cfg.sample_size, ctx.seed)
        vectors = ctx.gateway.embed(sample)
        theta = grid[len(grid) // 2]
        if len(sample) >= 3:
            try:
                theta = clustering.silhouette_threshold_search(vectors, grid)
            except ConfigurationError:
                # No cluster structure in grid range (e.g. a synonym-free
                # vocabulary): fall back to the mid-grid threshold, which then
                # yields an identity mapping.
                logger.info("threshold search found no structure; using %.2f", theta)
        full_vectors = ctx.gateway.embed(terms)
        clusters = clustering.agglomerative_cluster(full_vectors, theta)
        return theta, [[terms[i] for i in members] for members in clusters]

    theta_e, entity_clusters = choose(entities)
    theta_r, relation_clusters = choose(relations)
    term_list = sorted(set(entities) | set(relations))
    vectors = {t: v for t, v in zip(term_list, ctx.gateway.embed(term_list))}
    mapping = clustering.build_mappings(
        entity_clusters, relation_clusters, vectors, theta_e, theta_r
    )
    refined = clustering.refine_graph(global_graph, mapping)

    mapping_path = ctx.artifacts / "mapping.json"
    clustering.save_mapping(mapping, mapping_path)
    refined_path = ctx.artifacts / "refined.json"
    refined_path.write_text(
        canonical_json(
            {
                "triples": triples_to_rows(refined.triples),
                "concepts": {
                    "|".join(key): sorted(list(k) for k in triple_keys)
                    for key, triple_keys in sorted(refined.concept_triples.items())
                },
            }
        )
        + "\n",
        encoding="utf-8",
    )
    terms_path = ctx.artifacts / "terms.json"
    terms_path.write_text(canonical_json(term_list) + "\n", encoding="utf-8")
    emb_path = ctx.artifacts / "terms.emb"
    write_embedding_matrix(emb_path, np.stack([vectors[t] for t in term_list]))
    return [mapping_path, refined_path, terms_path, emb_path]


def _load_refined(ctx: StageContext) -> clustering.RefinedGraph:
    payload = json.loads((ctx.artifacts / "refined.json").read_text(encoding="utf-8"))
    triples = rows_to_triples(payload["triples"])
    concept_triples = {}
    for joined, keys in payload["concepts"].items():
        vocab, code = joined.split("|", 1)
        concept_triples[(vocab, code)] = frozenset(tuple(k) for k in keys)
    return clustering.RefinedGraph(
        triples=triples,
        nodes=triple_entities(triples),
        relations=frozenset(t.relation for t in triples),
        concept_triples=concept_triples,
    )


def stage_index(ctx: StageContext) -> list[Path]:
    refined = _load_refined(ctx)
    cfg = ctx.config.community
    found = communities.hierarchical_leiden(
        refined, runs=cfg.runs, base_seed=ctx.seed, max_cluster_size=cfg.max_cluster_size
    )
    summarized = communities.summarize_all(
        ctx.gateway,
        found,
        themes=enabled_tasks(ctx.config),
        chunk_triples=cfg.chunk_triples,
        max_summary_triples=cfg.max_summary_triples,
        seed=ctx.seed,
        combine_batch=cfg.combine_batch,
    )
    params = communities.IndexParams(
        runs=cfg.runs,
        base_seed=ctx.seed,
        max_cluster_size=cfg.max_cluster_size,
        chunk_triples=cfg.chunk_triples,
        max_summary_triples=cfg.max_summary_triples,
    )
    index = communities.build_index(summarized, ctx.gateway, params)
    index_dir = ctx.artifacts / "index"
    communities.save_index(index, index_dir)
    return sorted(index_dir.glob("*"))


def stage_augment(ctx: StageContext) -> list[Path]:
    cohort = _load_cohort(ctx)
    mapping = clustering.load_mapping(ctx.artifacts / "mapping.json")
    refined = _load_refined(ctx)
    index = communities.load_index(ctx.artifacts / "index")
    r = ctx.config.retrieval
    params = retrieval.RelevanceParams(
        alpha=r.alpha,
        beta=r.beta,
        lambda1=r.lambda1,
        lambda2=r.lambda2,
        lambda3=r.lambda3,
        max_summaries=r.max_summaries,
        hit_normalize=r.hit_normalize,
        recency_normalize=r.recency_normalize,
        decay_mode=r.decay_mode,
    )
    by_key = {t.key: t for t in refined.triples}
    concept_triples = {
        key: frozenset(by_key[k] for k in keys if k in by_key)
        for key, keys in refined.concept_triples.items()
    }
    tasks = enabled_tasks(ctx.config)
    theme_tables = {
        task.task_id: retrieval.theme_relevance_table(
            index, task, ctx.gateway, params.lambda3
        )
        for task in tasks
    }
    rows = []
    skipped = 0
    for record in cohort:
        if len(record.visits) < 2:
            skipped += 1
            continue
        window = observation_window(record)
        pg = retrieval.build_patient_graph(window, concept_triples, mapping)
        for task in tasks:
            if task.task_id not in record.labels:
                continue
            base = retrieval.build_base_context(window, task, cohort, ctx.gateway)
            augmented = retrieval.dgra_select(
                index, pg, base, params, task, ctx.gateway,
                theme_table=theme_tables[task.task_id],
            )
            rows.append(
                {
                    "patient_id": record.patient_id,
                    "task": task.task_id,
                    "base_context": base.text,
                    "selected": [
                        {
                            "community_id": s.community_id,
                            "score": s.score,
                            "summary": s.summary,
                        }
                        for s in augmented.selected
                    ],
                    "augmented_context": augmented.text,
                    "flags": sorted(set(base.flags) | set(augmented.flags)),
                }
            )
    if skipped:
        logger.info("augment: skipped %d single-visit patients", skipped)
    out = ctx.artifacts / "augmented.jsonl"
    write_jsonl(out, rows)
    return [out]


def stage_gen_train(ctx: StageContext) -> list[Path]:
    cohort = {r.patient_id: r for r in _load_cohort(ctx)}
    rows = []
    for row in read_jsonl(ctx.artifacts / "augmented.jsonl"):
        record = cohort.get(row["patient_id"])
        if record is None or row["task"] not in record.labels:
            logger.warning("gen-train: no label for %s/%s", row["patient_id"], row["task"])
            continue
        label = record.labels[row["task"]]
        best, candidates = generate_training_samples(
            ctx.gateway,
            augmented_text=row["augmented_context"],
            label=label,
            num_chains=ctx.config.training.num_chains,
        )
        if best is None:
            continue
        rows.append(
            {
                "patient_id": row["patient_id"],
                "task": row["task"],
                "label": label,
                "best_chain": best.chain,
                "confidence": best.confidence,
                "n_candidates": len(candidates),
            }
        )
    out = ctx.artifacts / "chains.jsonl"
    write_jsonl(out, rows)
    return [out]


def stage_emit(ctx: StageContext) -> list[Path]:
    augmented = {
        (row["patient_id"], row["task"]): row
        for row in read_jsonl(ctx.artifacts / "augmented.jsonl")
    }
    samples: list[FinetuneSample] = []
    for row in read_jsonl(ctx.artifacts / "chains.jsonl"):
        key = (row["patient_id"], row["task"])
        if key not in augmented:
            raise PipelineError(f"chains refer to missing augmented pair {key}")
        reasoning, label_sample = build_finetune_pair(
            row["patient_id"],
            row["task"],
            augmented[key]["augmented_context"],
            row["best_chain"],
            row["label"],
        )
        samples.extend((reasoning, label_sample))
    out = ctx.artifacts / "finetune.jsonl"
    emit_finetune_dataset(samples, out)
    return [out]


def stage_evaluate(ctx: StageContext) -> list[Path]:
    if not ctx.config.predictions:
        raise PipelineError("evaluate stage needs config.predictions")
    cohort = {r.patient_id: r for r in _load_cohort(ctx)}
    per_task: dict[str, dict[str, int]] = {}
    for row in read_jsonl(ctx.config.predictions):
        pid, task, pred = row["patient_id"], row["task"], int(row["prediction"])
        if pid not in cohort:
            raise PipelineError(f"prediction for unknown patient {pid!r}")
        if task not in cohort[pid].labels:
            raise PipelineError(f"patient {pid!r} has no label for task {task!r}")
        per_task.setdefault(task, {})[pid] = pred
    reports = {}
    for task, preds in sorted(per_task.items()):
        labels = {pid: cohort[pid].labels[task] for pid in preds}
        reports[task] = compute_metrics(
            preds, labels, f1_mode=ctx.config.metrics.f1_mode
        ).as_dict()
    out = ctx.artifacts / "metrics.json"
    out.write_text(canonical_json(reports) + "\n", encoding="utf-8")
    return [out]


_STAGE_FUNCS: dict[str, Callable[[StageContext], list[Path]]] = {
    "build-kg": stage_build_kg,
    "cluster": stage_cluster,
    "index": stage_index,
    "augment": stage_augment,
    "gen-train": stage_gen_train,
    "emit": stage_emit,
    "evaluate": stage_evaluate,
}

_STAGE_INPUTS: dict[str, Callable[[PipelineConfig], list[str]]] = {
    "build-kg": lambda c: [c.cohort, c.vocabularies, c.biokg, c.corpus, c.corpus_embeddings],
    "cluster": lambda c: [],
    "index": lambda c: [],
    "augment": lambda c: [c.cohort, c.vocabularies],
    "gen-train": lambda c: [c.cohort, c.vocabularies],
    "emit": lambda c: [],
    "evaluate": lambda c: [c.cohort, c.vocabularies] + ([c.predictions] if c.predictions else []),
}

# Outputs of earlier stages consumed by each stage, tracked as inputs so that
# an upstream change invalidates everything downstream.
_STAGE_DEPS: dict[str, tuple[str, ...]] = {
    "build-kg": (),
    "cluster": ("build-kg",),
    "index": ("cluster",),
    "augment": ("cluster", "index"),
    "gen-train": ("augment",),
    "emit": ("augment", "gen-train"),
    "evaluate": (),
}

_STAGE_PARAMS: dict[str, Callable[[PipelineConfig], dict]] = {
    "build-kg": lambda c: {"kg": c.kg.__dict__},
    "cluster": lambda c: {"cluster": {**c.cluster.__dict__}},
    "index": lambda c: {"community": c.community.__dict__, "tasks": c.tasks.__dict__},
    "augment": lambda c: {"retrieval": c.retrieval.__dict__, "tasks": c.tasks.__dict__},
    "gen-train": lambda c: {"training": c.training.__dict__},
    "emit": lambda c: {},
    "evaluate": lambda c: {"metrics": c.metrics.__dict__},
}


@dataclass
class RunReport:
    statuses: dict[str, str] = field(default_factory=dict)
    manifest_hash: str = ""
    manifest_path: Path | None = None


def _relative_name(path: Path, artifacts: Path) -> str:
    try:
        return path.resolve().relative_to(artifacts.resolve()).as_posix()
    except ValueError:
        return path.name


def _hash_files(paths: Sequence[Path], artifacts: Path) -> dict[str, str]:
    out = {}
    for path in paths:
        if not path.exists():
            raise PipelineError(f"missing file: {path}")
        out[_relative_name(path, artifacts)] = file_sha256(path)
    return out


def _manifest_hash(manifest: dict) -> str:
    body = {k: v for k, v in manifest.items() if k != "manifest_hash"}
    return hashlib.sha256(canonical_json(body).encode("utf-8")).hexdigest()


def run_pipeline(
    config: PipelineConfig,
    force: bool = False,
    only: Sequence[str] | None = None,
) -> RunReport:
    """Run the requested stages in order, skipping any stage whose recorded
    inputs, parameters, and outputs are all unchanged (unless forced)."""
    wanted = list(only) if only else list(STAGES)
    for name in wanted:
        if name not in STAGES:
            raise PipelineError(f"unknown stage {name!r}")
    artifacts = Path(config.artifacts_dir)
    artifacts.mkdir(parents=True, exist_ok=True)
    manifest_path = artifacts / "manifest.json"
    manifest = {
        "schema_version": MANIFEST_SCHEMA_VERSION,
        "seed": config.seed,
        "stages": {},
    }
    if manifest_path.exists():
        try:
            prior = json.loads(manifest_path.read_text(encoding="utf-8"))
            if prior.get("schema_version") == MANIFEST_SCHEMA_VERSION:
                manifest["stages"] = prior.get("stages", {})
        except json.JSONDecodeError:
            logger.warning("ignoring unreadable manifest at %s", manifest_path)

    gateway = build_gateway(config, artifacts)
    report = RunReport()
    for name in STAGES:
        if name not in wanted:
            continue
        try:
            status = _run_stage(name, config, artifacts, gateway, manifest, force)
        except KareError as exc:
            raise PipelineError(f"stage {name} failed: {exc}") from exc
        report.statuses[name] = status
        manifest["manifest_hash"] = _manifest_hash(manifest)
        manifest_path.write_text(
            json.dumps(manifest, sort_keys=True, indent=1) + "\n", encoding="utf-8"
        )
    report.manifest_hash = manifest.get("manifest_hash", "")
    report.manifest_path = manifest_path
    return report


def _stage_input_hashes(
    name: str, config: PipelineConfig, artifacts: Path, manifest: dict
) -> dict[str, str]:
    hashes = _hash_files(
        [Path(p) for p in _STAGE_INPUTS[name](config)], artifacts
    )
    for dep in _STAGE_DEPS[name]:
        dep_entry = manifest["stages"].get(dep)
        if dep_entry is None:
            raise PipelineError(f"stage {name} needs outputs of {dep}; run it first")
        for rel, digest in dep_entry["outputs"].items():
            hashes[f"{dep}:{rel}"] = digest
    return hashes


def _run_stage(
    name: str,
    config: PipelineConfig,
    artifacts: Path,
    gateway: Gateway,
    manifest: dict,
    force: bool,
) -> str:
    params = _STAGE_PARAMS[name](config)
    seed = stage_seed(config.seed, name)
    inputs = _stage_input_hashes(name, config, artifacts, manifest)
    entry = manifest["stages"].get(name)
    if entry is not None and not force:
        unchanged = (
            entry.get("params") == params
            and entry.get("seed") == seed
            and entry.get("inputs") == inputs
            and all(
                (artifacts / rel).exists() and file_sha256(artifacts / rel) == digest
                for rel, digest in entry.get("outputs", {}).items()
            )
        )
        if unchanged:
            logger.info("stage %s: up to date, skipping", name)
            return "skipped"
    logger.info("stage %s: running", name)
    ctx = StageContext(config=config, artifacts=artifacts, gateway=gateway, seed=seed)
    outputs = _STAGE_FUNCS[name](ctx)
    manifest["stages"][name] = {
        "params": params,
        "seed": seed,
        "inputs": inputs,
        "outputs": _hash_files(outputs, artifacts),
    }
    return "completed"
