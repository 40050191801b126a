"""Binary confusion-matrix metrics and tabular reports.

Scores are kept at full precision. Rounding happens only when rendering:
two decimals for scores, and integer percentages taken from the
two-decimal value (so 0.975 shows as 0.97 and 97).
"""

from __future__ import annotations

import csv
import io
import json
import os
import warnings
from dataclasses import asdict, dataclass, field
from typing import Mapping, Sequence

from .datapipe import LABELS, canonical_label

DISPLAY_NAMES = {"COVID-CXR": "Covid-CXR", "Normal-CXR": "Normal-CXR"}
COLUMNS = ("Class", "Precision", "Recall", "F1-score", "Support",
           "Accuracy (%)", "Sensitivity (%)", "Specificity (%)")
SCORE_KEYS = ("precision", "recall", "f1")


class MetricsWarning(UserWarning):
    pass


def _to_label(x) -> str:
    if isinstance(x, (int,)) or (hasattr(x, "dtype") and getattr(x, "dtype").kind in "iu"):
        i = int(x)
        if not 0 <= i < len(LABELS):
            raise ValueError(f"unknown label index {i}")
        return LABELS[i]
    return canonical_label(str(x))


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    fp: int
    fn: int
    tn: int
    positive_class: str = LABELS[0]
    negative_class: str = LABELS[1]

    def __post_init__(self):
        for name in ("tp", "fp", "fn", "tn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ValueError(f"{name} must be a non-negative integer, got {v}")
        if self.positive_class == self.negative_class:
            raise ValueError("positive and negative class must differ")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def swapped(self) -> "ConfusionMatrix":
        return ConfusionMatrix(self.tn, self.fn, self.fp, self.tp, self.negative_class, self.positive_class)

    @classmethod
    def from_outcome(cls, tp: int, fn: int, fp: int, tn: int, **kw) -> "ConfusionMatrix":
        """Build from the (TP, FN, FP, TN) order used when reading a 2x2 plot row by row."""
        return cls(tp=tp, fp=fp, fn=fn, tn=tn, **kw)


def confusion(predicted: Sequence, truth: Sequence, positive_class: str = LABELS[0]) -> ConfusionMatrix:
    if len(predicted) != len(truth):
        raise ValueError(f"{len(predicted)} predictions for {len(truth)} true labels")
    pos = canonical_label(positive_class)
    neg = next(lab for lab in LABELS if lab != pos)
    tp = fp = fn = tn = 0
    for p, t in zip(predicted, truth):
        p_pos, t_pos = _to_label(p) == pos, _to_label(t) == pos
        if p_pos and t_pos:
            tp += 1
        elif p_pos:
            fp += 1
        elif t_pos:
            fn += 1
        else:
            tn += 1
    return ConfusionMatrix(tp, fp, fn, tn, pos, neg)


@dataclass(frozen=True)
class ClassReport:
    name: str
    precision: float
    recall: float
    f1: float
    support: int

    def __post_init__(self):
        if not self.name:
            raise ValueError("class name must be non-empty")
        for key in SCORE_KEYS:
            v = getattr(self, key)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{key} {v} outside [0, 1]")
        if self.support < 0:
            raise ValueError("support must be non-negative")


@dataclass(frozen=True)
class SummaryReport:
    classes: tuple[ClassReport, ...]
    accuracy: float
    macro: dict[str, float]
    weighted: dict[str, float]
    sensitivity: float
    specificity: float
    flags: tuple[str, ...] = field(default=())

    @property
    def total(self) -> int:
        return sum(c.support for c in self.classes)

    def to_dict(self) -> dict:
        d = asdict(self)
        d["classes"] = [asdict(c) for c in self.classes]
        d["flags"] = list(self.flags)
        return d

    @classmethod
    def from_dict(cls, d: Mapping) -> "SummaryReport":
        return cls(classes=tuple(ClassReport(**c) for c in d["classes"]), accuracy=d["accuracy"],
                   macro=dict(d["macro"]), weighted=dict(d["weighted"]),
                   sensitivity=d["sensitivity"], specificity=d["specificity"], flags=tuple(d.get("flags", ())))


def _ratio(num: int, den: int, what: str, flags: list[str]) -> float:
    if den == 0:
        msg = f"{what}: zero denominator, reported as 0"
        flags.append(msg)
        warnings.warn(msg, MetricsWarning, stacklevel=3)
        return 0.0
    return num / den


def _f1(p: float, r: float) -> float:
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _class_report(cm: ConfusionMatrix, flags: list[str]) -> ClassReport:
    name = cm.positive_class
    p = _ratio(cm.tp, cm.tp + cm.fp, f"{name} precision", flags)
    r = _ratio(cm.tp, cm.tp + cm.fn, f"{name} recall", flags)
    return ClassReport(name, p, r, _f1(p, r), cm.tp + cm.fn)


def aggregate(reports: Sequence[ClassReport]) -> tuple[dict[str, float], dict[str, float]]:
    """Unweighted and support-weighted means of per-class scores."""
    if not reports:
        raise ValueError("need at least one class report")
    total = sum(r.support for r in reports)
    if total == 0:
        raise ValueError("total support is zero")
    macro = {k: sum(getattr(r, k) for r in reports) / len(reports) for k in SCORE_KEYS}
    weighted = {k: sum(getattr(r, k) * r.support for r in reports) / total for k in SCORE_KEYS}
    return macro, weighted


def compute_metrics(cm: ConfusionMatrix) -> SummaryReport:
    if cm.total == 0:
        raise ValueError("confusion matrix is empty")
    flags: list[str] = []
    pos = _class_report(cm, flags)
    neg = _class_report(cm.swapped(), flags)
    macro, weighted = aggregate([pos, neg])
    specificity = _ratio(cm.tn, cm.tn + cm.fp, "specificity", flags)
    return SummaryReport((pos, neg), (cm.tp + cm.tn) / cm.total, macro, weighted,
                         pos.recall, specificity, tuple(flags))


# ------------------------------------------------------------------- rendering

def fmt_score(x: float) -> str:
    return f"{round(x, 2):.2f}"


def fmt_percent(x: float) -> str:
    return str(int(round(round(x, 2) * 100)))


def _rows(s: SummaryReport) -> list[list[str]]:
    rows = []
    for i, c in enumerate(s.classes):
        extra = [fmt_percent(s.accuracy), fmt_percent(s.sensitivity), fmt_percent(s.specificity)] if i == 0 else ["", "", ""]
        rows.append([DISPLAY_NAMES.get(c.name, c.name), fmt_score(c.precision), fmt_score(c.recall),
                     fmt_score(c.f1), str(c.support), *extra])
    for name, agg in (("Macro-average", s.macro), ("Weighted-average", s.weighted)):
        rows.append([name, *(fmt_score(agg[k]) for k in SCORE_KEYS), str(s.total), "", "", ""])
    return rows


def _raw_notes(s: SummaryReport) -> list[str]:
    notes = []
    for name, v in (("accuracy", s.accuracy), ("sensitivity", s.sensitivity), ("specificity", s.specificity)):
        # flag values whose displayed percent hides a half-point
        if abs(v * 100 - int(fmt_percent(v))) >= 0.5 - 1e-9:
            notes.append(f"raw {name} {v:.4f}")
    return notes


def _markdown(header: list[str], rows: list[list[str]]) -> str:
    lines = ["| " + " | ".join(header) + " |", "|" + "|".join("---" for _ in header) + "|"]
    lines += ["| " + " | ".join(r) + " |" for r in rows]
    return "\n".join(lines) + "\n"


def _csv(header: list[str], rows: list[list[str]]) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()


def render_report(summary: SummaryReport, fmt: str = "markdown") -> str:
    if fmt == "json":
        return json.dumps(summary.to_dict(), indent=2, sort_keys=True) + "\n"
    rows = _rows(summary)
    if fmt == "csv":
        return _csv(list(COLUMNS), rows)
    if fmt == "markdown":
        text = _markdown(list(COLUMNS), rows)
        notes = _raw_notes(summary) + list(summary.flags)
        return text + ("\n" + "; ".join(notes) + "\n" if notes else "")
    raise ValueError(f"unknown report format {fmt!r}")


def parse_report(text: str) -> SummaryReport:
    return SummaryReport.from_dict(json.loads(text))


def render_comparison(summaries: Mapping[str, SummaryReport], fmt: str = "markdown") -> str:
    """Side-by-side table with a leading Dataset column, one block per arm."""
    if fmt == "json":
        return json.dumps({k: v.to_dict() for k, v in summaries.items()}, indent=2, sort_keys=True) + "\n"
    header = ["Dataset", *COLUMNS]
    rows = [[name if i == 0 else "", *r] for name, s in summaries.items() for i, r in enumerate(_rows(s))]
    if fmt == "csv":
        return _csv(header, rows)
    if fmt == "markdown":
        text = _markdown(header, rows)
        notes = [f"{name}: {', '.join(n)}" for name, s in summaries.items() if (n := _raw_notes(s))]
        return text + ("\n" + "\n".join(notes) + "\n" if notes else "")
    raise ValueError(f"unknown report format {fmt!r}")


# ----------------------------------------------------------- prediction dumps

def write_predictions(path: str | os.PathLike, ids: Sequence[str], truth: Sequence, predicted: Sequence) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "true_label", "predicted_label"])
        for i, t, p in zip(ids, truth, predicted, strict=True):
            w.writerow([i, _to_label(t), _to_label(p)])


def read_predictions(path: str | os.PathLike) -> tuple[list[str], list[str], list[str]]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        missing = {"id", "true_label", "predicted_label"} - set(reader.fieldnames or [])
        if missing:
            raise ValueError(f"{path}: missing column(s) {sorted(missing)}")
        rows = list(reader)
    return [r["id"] for r in rows], [r["true_label"] for r in rows], [r["predicted_label"] for r in rows]
