"""Binary classification metrics over prediction/label maps, computed in
exact rational arithmetic from the confusion counts."""

from __future__ import annotations

from dataclasses import dataclass
from fractions import Fraction
from typing import Mapping

from .errors import MetricsError

F1_MACRO = "macro"
F1_POSITIVE = "positive"  # single-class F1 of the positive label only


@dataclass(frozen=True)
class MetricsReport:
    tp: int
    tn: int
    fp: int
    fn: int
    accuracy: Fraction
    macro_f1: Fraction
    sensitivity: Fraction
    specificity: Fraction
    flags: tuple[str, ...] = ()

    def as_dict(self) -> dict:
        return {
            "tp": self.tp,
            "tn": self.tn,
            "fp": self.fp,
            "fn": self.fn,
            "accuracy": float(self.accuracy),
            "macro_f1": float(self.macro_f1),
            "sensitivity": float(self.sensitivity),
            "specificity": float(self.specificity),
            "flags": list(self.flags),
        }


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> Fraction:
    if den == 0:
        flags.append(flag)
        return Fraction(0)
    return Fraction(num, den)


def compute_metrics(
    predictions: Mapping[str, int],
    labels: Mapping[str, int],
    f1_mode: str = F1_MACRO,
) -> MetricsReport:
    """Accuracy, macro-F1, sensitivity, and specificity from exact confusion
    counts. Key sets must match; zero-denominator metrics come back as 0 with
    a flag instead of failing."""
    missing_labels = sorted(set(predictions) - set(labels))
    missing_preds = sorted(set(labels) - set(predictions))
    if missing_labels or missing_preds:
        raise MetricsError(
            f"key mismatch: no label for {missing_labels[:5]}, "
            f"no prediction for {missing_preds[:5]}"
        )
    if f1_mode not in (F1_MACRO, F1_POSITIVE):
        raise MetricsError(f"unknown f1_mode {f1_mode!r}")
    tp = tn = fp = fn = 0
    for key, pred in predictions.items():
        label = labels[key]
        if pred not in (0, 1) or label not in (0, 1):
            raise MetricsError(f"non-binary value for {key!r}")
        if pred == 1 and label == 1:
            tp += 1
        elif pred == 0 and label == 0:
            tn += 1
        elif pred == 1 and label == 0:
            fp += 1
        else:
            fn += 1

    flags: list[str] = []
    total = tp + tn + fp + fn
    accuracy = _ratio(tp + tn, total, "empty-input", flags)
    sensitivity = _ratio(tp, tp + fn, "no-positive-labels", flags)
    specificity = _ratio(tn, tn + fp, "no-negative-labels", flags)

    precision_pos = _ratio(tp, tp + fp, "no-positive-predictions", flags)
    f1_pos = (
        Fraction(0)
        if precision_pos + sensitivity == 0
        else 2 * precision_pos * sensitivity / (precision_pos + sensitivity)
    )
    if f1_mode == F1_POSITIVE:
        macro_f1 = f1_pos
    else:
        precision_neg = _ratio(tn, tn + fn, "no-negative-predictions", flags)
        f1_neg = (
            Fraction(0)
            if precision_neg + specificity == 0
            else 2 * precision_neg * specificity / (precision_neg + specificity)
        )
        macro_f1 = (f1_pos + f1_neg) / 2

    report = MetricsReport(
        tp, tn, fp, fn, accuracy, macro_f1, sensitivity, specificity, tuple(flags)
    )
    _check_identity(report)
    return report


def _check_identity(report: MetricsReport) -> None:
    # accuracy == (sensitivity * P + specificity * N) / (P + N), exactly.
    positives = report.tp + report.fn
    negatives = report.tn + report.fp
    if positives + negatives == 0:
        return
    blended = (
        report.sensitivity * positives + report.specificity * negatives
    ) / (positives + negatives)
    if blended != report.accuracy:
        raise MetricsError("internal metric identity violated")
