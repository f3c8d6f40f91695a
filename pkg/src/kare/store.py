"""File formats shared across stages: the binary embedding matrix sidecar,
the JSON-lines document corpus, and canonical JSONL helpers."""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .errors import KareError

_MAGIC = b"KEMB"
_SCHEMA_VERSION = 1
_HEADER = struct.Struct("<4sIII")  # magic, schema version, rows, dim


def write_embedding_matrix(path: str | Path, matrix: np.ndarray) -> None:
    """Row-major float32 matrix with a fixed little-endian header."""
    arr = np.ascontiguousarray(matrix, dtype=np.float32)
    if arr.ndim != 2:
        raise KareError("embedding matrix must be 2-dimensional")
    with open(path, "wb") as fh:
        fh.write(_HEADER.pack(_MAGIC, _SCHEMA_VERSION, arr.shape[0], arr.shape[1]))
        fh.write(arr.tobytes(order="C"))


def read_embedding_matrix(path: str | Path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < _HEADER.size:
        raise KareError(f"{path}: truncated embedding matrix header")
    magic, version, rows, dim = _HEADER.unpack_from(raw)
    if magic != _MAGIC:
        raise KareError(f"{path}: not an embedding matrix file")
    if version != _SCHEMA_VERSION:
        raise KareError(f"{path}: unsupported embedding schema version {version}")
    expected = _HEADER.size + rows * dim * 4
    if len(raw) != expected:
        raise KareError(f"{path}: embedding matrix size mismatch")
    data = np.frombuffer(raw, dtype="<f4", offset=_HEADER.size)
    return data.reshape(rows, dim).copy()


def write_jsonl(path: str | Path, rows: Iterable[dict]) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for row in rows:
            fh.write(canonical_json(row) + "\n")


def read_jsonl(path: str | Path) -> Iterator[dict]:
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            try:
                yield json.loads(line)
            except json.JSONDecodeError as exc:
                raise KareError(f"{path}: line {lineno}: invalid JSON ({exc.msg})") from exc


def canonical_json(payload: object) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=True, separators=(",", ":"))


@dataclass(frozen=True)
class Document:
    doc_id: str
    text: str


class CorpusStore:
    """A document collection with precomputed embeddings, loaded read-only.

    The JSONL file holds ``{"id": ..., "text": ...}`` lines; the sidecar
    matrix holds one row per document in file order.
    """

    def __init__(self, documents: list[Document], embeddings: np.ndarray):
        if embeddings.shape[0] != len(documents):
            raise KareError(
                f"corpus has {len(documents)} documents but {embeddings.shape[0]} embeddings"
            )
        self.documents = documents
        self.embeddings = np.asarray(embeddings, dtype=np.float32)

    def __len__(self) -> int:
        return len(self.documents)

    @property
    def dimension(self) -> int:
        return int(self.embeddings.shape[1]) if len(self.documents) else 0

    @classmethod
    def load(cls, corpus_path: str | Path, embeddings_path: str | Path) -> "CorpusStore":
        documents = []
        for row in read_jsonl(corpus_path):
            if "id" not in row or "text" not in row:
                raise KareError(f"{corpus_path}: document rows need id and text fields")
            documents.append(Document(str(row["id"]), str(row["text"])))
        embeddings = read_embedding_matrix(embeddings_path)
        return cls(documents, embeddings)

    @classmethod
    def save(
        cls,
        documents: list[Document],
        embeddings: np.ndarray,
        corpus_path: str | Path,
        embeddings_path: str | Path,
    ) -> None:
        write_jsonl(corpus_path, ({"id": d.doc_id, "text": d.text} for d in documents))
        write_embedding_matrix(embeddings_path, embeddings)
