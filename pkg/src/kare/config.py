"""Pipeline configuration: one JSON file holding every stage parameter, with
defaults matching the documented operating point."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigurationError


@dataclass
class BackendConfig:
    chat: str = "mock"  # mock | echo | http
    embed: str = "mock"  # mock | http
    embed_dim: int = 64
    cache_dir: str | None = None
    max_in_flight: int = 4
    max_attempts: int = 3
    backoff_base: float = 0.1
    max_output_tokens: int = 4096


@dataclass
class SynthConfig:
    n_patients: int = 200
    positive_rate: float = 0.2
    vocab_sizes: dict = field(
        default_factory=lambda: {"condition": 40, "procedure": 25, "medication": 30}
    )
    biokg_extra_edges: int = 220
    corpus_docs: int = 120


@dataclass
class KgConfig:
    cooccur_top_x: int = 20
    top_documents: int = 3
    set_filter_threshold: int = 5
    path_max_length: int = 7
    path_max_paths: int = 40
    path_max_nodes: int = 12000


@dataclass
class ClusterConfig:
    threshold_grid: list = field(
        default_factory=lambda: [round(0.02 * i, 2) for i in range(1, 21)]
    )
    sample_size: int = 2000


@dataclass
class CommunityConfig:
    runs: int = 25
    max_cluster_size: int = 5
    chunk_triples: int = 20
    max_summary_triples: int = 150
    combine_batch: int = 10


@dataclass
class RetrievalConfig:
    alpha: float = 0.1
    beta: float = 0.7
    lambda1: float = 0.2
    lambda2: float = 0.2
    lambda3: float = 0.3
    max_summaries: int = 10
    hit_normalize: str = "community"
    recency_normalize: bool = True
    decay_mode: str = "mean"


@dataclass
class TrainingConfig:
    num_chains: int = 3


@dataclass
class TasksConfig:
    enabled: list = field(default_factory=lambda: ["mortality", "readmission"])
    readmission_window_days: int = 15


@dataclass
class MetricsConfig:
    f1_mode: str = "macro"


@dataclass
class PipelineConfig:
    artifacts_dir: str = "artifacts"
    seed: int = 42
    cohort: str = "artifacts/inputs/cohort.jsonl"
    vocabularies: str = "artifacts/inputs/vocabularies.json"
    biokg: str = "artifacts/inputs/biokg.tsv"
    corpus: str = "artifacts/inputs/corpus.jsonl"
    corpus_embeddings: str = "artifacts/inputs/corpus.emb"
    predictions: str | None = None
    backends: BackendConfig = field(default_factory=BackendConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    kg: KgConfig = field(default_factory=KgConfig)
    cluster: ClusterConfig = field(default_factory=ClusterConfig)
    community: CommunityConfig = field(default_factory=CommunityConfig)
    retrieval: RetrievalConfig = field(default_factory=RetrievalConfig)
    training: TrainingConfig = field(default_factory=TrainingConfig)
    tasks: TasksConfig = field(default_factory=TasksConfig)
    metrics: MetricsConfig = field(default_factory=MetricsConfig)

    def to_dict(self) -> dict:
        return asdict(self)


_SECTIONS = {
    "backends": BackendConfig,
    "synth": SynthConfig,
    "kg": KgConfig,
    "cluster": ClusterConfig,
    "community": CommunityConfig,
    "retrieval": RetrievalConfig,
    "training": TrainingConfig,
    "tasks": TasksConfig,
    "metrics": MetricsConfig,
}


def config_from_dict(payload: dict) -> PipelineConfig:
    unknown = set(payload) - set(PipelineConfig.__dataclass_fields__)
    if unknown:
        raise ConfigurationError(f"unknown config keys: {sorted(unknown)}")
    kwargs = {}
    for key, value in payload.items():
        if key in _SECTIONS:
            section_cls = _SECTIONS[key]
            bad = set(value) - set(section_cls.__dataclass_fields__)
            if bad:
                raise ConfigurationError(f"unknown keys in config.{key}: {sorted(bad)}")
            kwargs[key] = section_cls(**value)
        else:
            kwargs[key] = value
    return PipelineConfig(**kwargs)


def load_config(path: str | Path) -> PipelineConfig:
    try:
        payload = json.loads(Path(path).read_text(encoding="utf-8"))
    except FileNotFoundError:
        raise ConfigurationError(f"config file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise ConfigurationError(f"config file {path} is not valid JSON: {exc.msg}") from exc
    if not isinstance(payload, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return config_from_dict(payload)


def save_config(config: PipelineConfig, path: str | Path) -> None:
    Path(path).write_text(
        json.dumps(config.to_dict(), sort_keys=True, indent=1) + "\n", encoding="utf-8"
    )
