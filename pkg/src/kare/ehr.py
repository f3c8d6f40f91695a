"""EHR data model: coded patient records, prediction tasks, cohort I/O, and a
seeded synthetic cohort generator for desk-scale runs.

Timestamps are integer day offsets from a cohort epoch; the prediction tasks
only ever compare day differences, so no calendar handling is needed.
"""

from __future__ import annotations

import json
import random
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Mapping

from .errors import CohortError

VOCABULARIES = ("condition", "procedure", "medication")

TASK_MORTALITY = "mortality"
TASK_READMISSION = "readmission"

DEFAULT_READMISSION_WINDOW_DAYS = 15

_MORTALITY_DESCRIPTION = (
    "Mortality prediction task.\n"
    "Objective: predict whether the patient survives the next hospital visit,"
    " based only on the conditions, procedures, and medications recorded in"
    " the visits shown below.\n"
    "Labels: 1 = the patient dies during the next visit, 0 = the patient survives."
)

_READMISSION_DESCRIPTION = (
    "Readmission prediction task.\n"
    "Objective: predict whether the patient will be readmitted to the hospital"
    " within {window} days of the last visit shown below, based only on the"
    " recorded conditions, procedures, and medications.\n"
    "Labels: 1 = readmitted within {window} days, 0 = not readmitted."
)

# Representative theme terms steering task-aware community selection.
MORTALITY_THEME_TERMS = (
    "end-stage",
    "life-threatening",
    "terminal",
    "fatal outcome",
    "organ failure",
    "critical deterioration",
    "death",
)

READMISSION_THEME_TERMS = (
    "readmission",
    "recurrence",
    "relapse",
    "chronic instability",
    "post-discharge complication",
    "incomplete recovery",
    "follow-up care",
)


@dataclass(frozen=True)
class MedicalCode:
    """A coded clinical concept; (vocabulary, code) is the unique key."""

    vocabulary: str
    code: str
    display: str

    def __post_init__(self):
        if self.vocabulary not in VOCABULARIES:
            raise CohortError(f"unknown vocabulary {self.vocabulary!r} for code {self.code!r}")
        if not self.code:
            raise CohortError("medical code string must be nonempty")
        if not self.display:
            raise CohortError(f"display for code {self.code!r} must be nonempty")

    @property
    def key(self) -> tuple[str, str]:
        return (self.vocabulary, self.code)


@dataclass(frozen=True)
class Visit:
    """One hospital visit; index is the visit's position in the parent record."""

    index: int
    timestamp: int
    conditions: tuple[MedicalCode, ...] = ()
    procedures: tuple[MedicalCode, ...] = ()
    medications: tuple[MedicalCode, ...] = ()

    def all_codes(self) -> tuple[MedicalCode, ...]:
        return self.conditions + self.procedures + self.medications


@dataclass(frozen=True)
class PatientRecord:
    """An ordered visit history with binary task labels."""

    patient_id: str
    visits: tuple[Visit, ...]
    labels: Mapping[str, int] = field(default_factory=dict)

    def __post_init__(self):
        if not self.patient_id:
            raise CohortError("patient_id must be nonempty")
        if not self.visits:
            raise CohortError(f"patient {self.patient_id}: at least one visit required")
        for pos, visit in enumerate(self.visits):
            if visit.index != pos:
                raise CohortError(
                    f"patient {self.patient_id}: visit index {visit.index} at position {pos}"
                )
            if not visit.all_codes():
                raise CohortError(
                    f"patient {self.patient_id}: visit {pos} carries no codes"
                )
        timestamps = [v.timestamp for v in self.visits]
        if any(b < a for a, b in zip(timestamps, timestamps[1:])):
            raise CohortError(
                f"patient {self.patient_id}: visit timestamps must be nondecreasing"
            )
        for task, label in self.labels.items():
            if label not in (0, 1):
                raise CohortError(
                    f"patient {self.patient_id}: label for {task} must be 0 or 1"
                )

    def code_keys(self) -> frozenset[tuple[str, str]]:
        """Distinct (vocabulary, code) keys across all visits."""
        return frozenset(c.key for v in self.visits for c in v.all_codes())

    def codes(self) -> tuple[MedicalCode, ...]:
        """Distinct codes across all visits, ordered by key."""
        seen: dict[tuple[str, str], MedicalCode] = {}
        for visit in self.visits:
            for code in visit.all_codes():
                seen.setdefault(code.key, code)
        return tuple(seen[k] for k in sorted(seen))


@dataclass(frozen=True)
class TaskSpec:
    """A prediction task: description text plus theme terms used by retrieval."""

    task_id: str
    description: str
    theme_terms: tuple[str, ...]
    readmission_window_days: int | None = None

    def __post_init__(self):
        if self.task_id not in (TASK_MORTALITY, TASK_READMISSION):
            raise CohortError(f"unknown task id {self.task_id!r}")
        if not self.theme_terms:
            raise CohortError(f"task {self.task_id}: theme_terms must be nonempty")
        if self.task_id == TASK_READMISSION:
            window = self.readmission_window_days
            if window is None or window <= 0:
                raise CohortError("readmission task requires a positive window")


def mortality_task() -> TaskSpec:
    return TaskSpec(TASK_MORTALITY, _MORTALITY_DESCRIPTION, MORTALITY_THEME_TERMS)


def readmission_task(window_days: int = DEFAULT_READMISSION_WINDOW_DAYS) -> TaskSpec:
    return TaskSpec(
        TASK_READMISSION,
        _READMISSION_DESCRIPTION.format(window=window_days),
        READMISSION_THEME_TERMS,
        readmission_window_days=window_days,
    )


def derive_readmission_label(record: PatientRecord, window: int) -> int:
    """1 iff the gap between the last two visits is <= window days (inclusive)."""
    if len(record.visits) < 2:
        raise CohortError(
            f"patient {record.patient_id}: readmission label needs at least 2 visits"
        )
    gap = record.visits[-1].timestamp - record.visits[-2].timestamp
    return 1 if gap <= window else 0


def observation_window(record: PatientRecord) -> PatientRecord:
    """The record with its final visit removed: the history visible at
    prediction time for both tasks."""
    if len(record.visits) < 2:
        raise CohortError(
            f"patient {record.patient_id}: observation window needs at least 2 visits"
        )
    return PatientRecord(record.patient_id, record.visits[:-1], dict(record.labels))


# ---------------------------------------------------------------------------
# Cohort file I/O (JSON-lines, one record per line)
# ---------------------------------------------------------------------------

CodeVocabularies = Mapping[str, Mapping[str, str]]  # family -> code -> display


def _record_to_dict(record: PatientRecord) -> dict:
    return {
        "patient_id": record.patient_id,
        "visits": [
            {
                "timestamp": v.timestamp,
                "conditions": [c.code for c in v.conditions],
                "procedures": [c.code for c in v.procedures],
                "medications": [c.code for c in v.medications],
            }
            for v in record.visits
        ],
        "labels": {k: record.labels[k] for k in sorted(record.labels)},
    }


def _canonical_line(payload: dict) -> str:
    return json.dumps(payload, sort_keys=True, ensure_ascii=True, separators=(",", ":"))


def _codes_from(raw: object, family: str, vocab: CodeVocabularies | None, patient: str):
    if not isinstance(raw, list) or any(not isinstance(c, str) for c in raw):
        raise CohortError(f"patient {patient}: {family} list must hold code strings")
    out = []
    for code in raw:
        display = code
        if vocab is not None:
            display = vocab.get(family, {}).get(code, "")
            if not display:
                raise CohortError(
                    f"patient {patient}: code {code!r} missing from {family} vocabulary"
                )
        out.append(MedicalCode(family, code, display))
    return tuple(out)


def load_cohort(
    path: str | Path,
    fmt: str = "jsonl",
    vocabularies: CodeVocabularies | None = None,
) -> list[PatientRecord]:
    """Load a cohort file; rejects duplicate patient ids and any record that
    violates the data-model invariants. Records come back sorted by patient_id.

    When ``vocabularies`` is given, displays are resolved through it and
    unknown codes are rejected; otherwise the code string doubles as display.
    """
    if fmt != "jsonl":
        raise CohortError(f"unsupported cohort format {fmt!r}")
    records: dict[str, PatientRecord] = {}
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                payload = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CohortError(f"line {lineno}: invalid JSON ({exc.msg})") from exc
            try:
                record = _parse_record(payload, vocabularies)
            except CohortError as exc:
                raise CohortError(f"line {lineno}: {exc}") from exc
            if record.patient_id in records:
                raise CohortError(
                    f"line {lineno}: duplicate patient_id {record.patient_id!r}"
                )
            records[record.patient_id] = record
    return [records[pid] for pid in sorted(records)]


def _parse_record(payload: object, vocab: CodeVocabularies | None) -> PatientRecord:
    if not isinstance(payload, dict):
        raise CohortError("record line must be a JSON object")
    patient = payload.get("patient_id")
    if not isinstance(patient, str) or not patient:
        raise CohortError("patient_id must be a nonempty string")
    raw_visits = payload.get("visits")
    if not isinstance(raw_visits, list):
        raise CohortError(f"patient {patient}: visits must be a list")
    visits = []
    for idx, raw in enumerate(raw_visits):
        if not isinstance(raw, dict) or not isinstance(raw.get("timestamp"), int):
            raise CohortError(f"patient {patient}: visit {idx} needs an integer timestamp")
        visits.append(
            Visit(
                index=idx,
                timestamp=raw["timestamp"],
                conditions=_codes_from(raw.get("conditions", []), "condition", vocab, patient),
                procedures=_codes_from(raw.get("procedures", []), "procedure", vocab, patient),
                medications=_codes_from(raw.get("medications", []), "medication", vocab, patient),
            )
        )
    labels = payload.get("labels", {})
    if not isinstance(labels, dict):
        raise CohortError(f"patient {patient}: labels must be an object")
    return PatientRecord(patient, tuple(visits), dict(labels))


def save_cohort(records: Iterable[PatientRecord], path: str | Path) -> None:
    """Write records in the canonical JSON-lines form (sorted keys, compact
    separators) so that load -> save round-trips byte-identically."""
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        for record in records:
            fh.write(_canonical_line(_record_to_dict(record)) + "\n")


def save_vocabularies(vocab: CodeVocabularies, path: str | Path) -> None:
    payload = {fam: dict(sorted(vocab.get(fam, {}).items())) for fam in VOCABULARIES}
    Path(path).write_text(
        json.dumps(payload, sort_keys=True, ensure_ascii=True, indent=1) + "\n",
        encoding="utf-8",
    )


def load_vocabularies(path: str | Path) -> dict[str, dict[str, str]]:
    payload = json.loads(Path(path).read_text(encoding="utf-8"))
    if not isinstance(payload, dict):
        raise CohortError("vocabulary file must be a JSON object")
    return {fam: dict(payload.get(fam, {})) for fam in VOCABULARIES}


# ---------------------------------------------------------------------------
# Synthetic cohort generation
# ---------------------------------------------------------------------------

_FAMILY_PREFIX = {"condition": "C", "procedure": "P", "medication": "M"}


def synthetic_vocabularies(vocab_sizes: Mapping[str, int]) -> dict[str, dict[str, str]]:
    """Deterministic synthetic vocabularies, one entry per requested code."""
    vocab: dict[str, dict[str, str]] = {}
    for family in VOCABULARIES:
        size = int(vocab_sizes.get(family, 0))
        prefix = _FAMILY_PREFIX[family]
        vocab[family] = {
            f"{prefix}{i:03d}": f"synthetic {family} {i:03d}" for i in range(1, size + 1)
        }
    return vocab


def _risk_split(codes: list[str]) -> tuple[list[str], list[str]]:
    # Risk subset: leading fifth of the vocabulary, at least one code.
    cut = max(1, len(codes) // 5)
    risk = codes[:cut]
    rest = codes[cut:] or codes
    return risk, rest


def generate_synthetic_cohort(
    seed: int,
    n_patients: int,
    vocab_sizes: Mapping[str, int],
    positive_rate: float,
    readmission_window: int = DEFAULT_READMISSION_WINDOW_DAYS,
) -> list[PatientRecord]:
    """Seeded synthetic cohort. Mortality-positive patients draw their codes
    mostly from a designated risk subset of each vocabulary, so retrieval of
    knowledge planted on those codes correlates with the labels. Stored
    readmission labels are consistent with the generated visit gaps.
    """
    if n_patients < 1:
        raise CohortError("n_patients must be >= 1")
    if not 0.0 <= positive_rate <= 1.0:
        raise CohortError("positive_rate must lie in [0, 1]")
    vocab = synthetic_vocabularies(vocab_sizes)
    pools = {}
    for family in VOCABULARIES:
        codes = sorted(vocab[family])
        if not codes:
            raise CohortError(f"vocab_sizes must allow >=1 {family} code")
        pools[family] = (_risk_split(codes), codes)

    rng = random.Random(seed)
    n_positive = round(positive_rate * n_patients)
    mortality_positive = set(rng.sample(range(n_patients), n_positive))
    readmit_positive = set(rng.sample(range(n_patients), n_positive))

    records = []
    for i in range(n_patients):
        patient_id = f"P{i:04d}"
        mortality = 1 if i in mortality_positive else 0
        readmitted = 1 if i in readmit_positive else 0
        n_visits = rng.randint(2, 5)
        timestamps = [rng.randint(0, 60)]
        for step in range(1, n_visits):
            if step == n_visits - 1:
                gap = (
                    rng.randint(1, readmission_window)
                    if readmitted
                    else rng.randint(readmission_window + 1, readmission_window + 75)
                )
            else:
                gap = rng.randint(1, 90)
            timestamps.append(timestamps[-1] + gap)
        visits = []
        for idx, ts in enumerate(timestamps):
            per_family = {}
            for family in VOCABULARIES:
                (risk, rest), full = pools[family]
                k = rng.randint(1, min(3, len(full)))
                chosen = []
                for _ in range(k):
                    preferred = risk if mortality else rest
                    pool = preferred if rng.random() < 0.8 else full
                    chosen.append(rng.choice(pool))
                per_family[family] = tuple(
                    MedicalCode(family, c, vocab[family][c]) for c in sorted(set(chosen))
                )
            visits.append(
                Visit(
                    index=idx,
                    timestamp=ts,
                    conditions=per_family["condition"],
                    procedures=per_family["procedure"],
                    medications=per_family["medication"],
                )
            )
        records.append(
            PatientRecord(
                patient_id,
                tuple(visits),
                {TASK_MORTALITY: mortality, TASK_READMISSION: readmitted},
            )
        )
    return records
