"""Reasoning-chain sample generation and the multitask fine-tune dataset.

Each patient-task pair yields exactly two training lines sharing one input
context: a reasoning sample and a label-prediction sample.
"""

from __future__ import annotations

import logging
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

from .errors import DatasetError
from .gateway import ChatRequest, Gateway
from .store import canonical_json, read_jsonl

logger = logging.getLogger(__name__)

PREFIX_REASONING = "[Reasoning]"
PREFIX_LABEL = "[Label Prediction]"

DEFAULT_NUM_CHAINS = 3

_CONFIDENCE = re.compile(r"confidence\s*[:=]?\s*([1-5])", re.IGNORECASE)


@dataclass(frozen=True)
class ReasoningCandidate:
    chain: str
    confidence: int


@dataclass(frozen=True)
class FinetuneSample:
    patient_id: str
    task: str
    prefix: str
    input: str
    target: str

    def sort_key(self) -> tuple[str, str, str]:
        return (self.patient_id, self.task, self.prefix)


def parse_confidence(text: str) -> int:
    """The labeled 1-5 confidence in a chain; missing means lowest (1)."""
    match = _CONFIDENCE.search(text)
    return int(match.group(1)) if match else 1


def generate_training_samples(
    gateway: Gateway,
    augmented_text: str,
    label: int,
    num_chains: int = DEFAULT_NUM_CHAINS,
) -> tuple[ReasoningCandidate | None, list[ReasoningCandidate]]:
    """Request ``num_chains`` reasoning chains (the prompt includes the ground
    truth label) and return the highest-confidence one; ties go to the first
    generated. Returns (None, []) when every response is empty."""
    if num_chains < 1:
        raise DatasetError("num_chains must be >= 1")
    if label not in (0, 1):
        raise DatasetError("label must be 0 or 1")
    candidates: list[ReasoningCandidate] = []
    for i in range(num_chains):
        request = ChatRequest(
            "chain_gen",
            {"context": augmented_text, "label": str(label)},
            determinism=float(i),
        )
        text = gateway.complete(request).text.strip()
        if not text:
            logger.warning("empty reasoning chain response (sample %d) skipped", i)
            continue
        candidates.append(ReasoningCandidate(text, parse_confidence(text)))
    if not candidates:
        logger.warning("all %d chain generations failed; pair skipped", num_chains)
        return None, []
    best = max(candidates, key=lambda c: c.confidence)  # max() keeps the first tie
    return best, candidates


def build_finetune_pair(
    patient_id: str,
    task_id: str,
    augmented_text: str,
    best_chain: str,
    label: int,
) -> tuple[FinetuneSample, FinetuneSample]:
    """The [Reasoning] and [Label Prediction] samples sharing one input; the
    ground-truth label appears only in targets, never in the input."""
    return (
        FinetuneSample(patient_id, task_id, PREFIX_REASONING, augmented_text, best_chain),
        FinetuneSample(patient_id, task_id, PREFIX_LABEL, augmented_text, str(label)),
    )


def emit_finetune_dataset(samples: Sequence[FinetuneSample], path: str | Path) -> None:
    """Write the dataset as JSON-lines ordered by (patient, task, prefix);
    duplicate keys are an error and label targets must be "0" or "1"."""
    seen = set()
    for sample in samples:
        key = sample.sort_key()
        if key in seen:
            raise DatasetError(f"duplicate sample for {key}")
        seen.add(key)
        if sample.prefix not in (PREFIX_REASONING, PREFIX_LABEL):
            raise DatasetError(f"unknown prefix {sample.prefix!r}")
        if sample.prefix == PREFIX_LABEL and sample.target not in ("0", "1"):
            raise DatasetError(f"label target must be '0' or '1' for {key}")
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        if not samples:
            fh.write("# finetune dataset: 0 samples\n")
            return
        for sample in sorted(samples, key=FinetuneSample.sort_key):
            fh.write(
                canonical_json(
                    {
                        "patient_id": sample.patient_id,
                        "task": sample.task,
                        "prefix": sample.prefix,
                        "input": sample.input,
                        "target": sample.target,
                    }
                )
                + "\n"
            )


def load_finetune_dataset(path: str | Path) -> list[FinetuneSample]:
    samples = []
    for row in read_jsonl(path):
        samples.append(
            FinetuneSample(
                row["patient_id"], row["task"], row["prefix"], row["input"], row["target"]
            )
        )
    return samples
