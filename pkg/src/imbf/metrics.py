"""Confusion matrices, per-class precision/recall/F1, accuracy and reports."""

from __future__ import annotations

import csv
import hashlib
import io
import json
from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


class MetricsError(ValueError):
    pass


@dataclass(frozen=True)
class ConfusionMatrix:
    """Rows are actual classes, columns predicted."""

    class_names: tuple[str, ...]
    cells: np.ndarray

    def __post_init__(self) -> None:
        k = len(self.class_names)
        if self.cells.shape != (k, k):
            raise MetricsError(f"confusion matrix shape {self.cells.shape} does not fit {k} classes")

    @property
    def total(self) -> int:
        return int(self.cells.sum())

    def support(self) -> list[int]:
        return [int(v) for v in self.cells.sum(axis=1)]

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["actual\\predicted", *self.class_names])
        for name, row in zip(self.class_names, self.cells):
            w.writerow([name, *(int(v) for v in row)])
        return buf.getvalue()


def confusion_matrix(predictions: Sequence[int], labels: Sequence[int], k: int,
                     class_names: Sequence[str] | None = None) -> ConfusionMatrix:
    preds = np.asarray(predictions, dtype=np.int64).reshape(-1)
    labs = np.asarray(labels, dtype=np.int64).reshape(-1)
    if preds.shape != labs.shape:
        raise MetricsError(f"{len(preds)} predictions but {len(labs)} labels")
    for name, arr in (("prediction", preds), ("label", labs)):
        if arr.size and (arr.min() < 0 or arr.max() >= k):
            raise MetricsError(f"{name} index out of range for {k} classes")
    cells = np.zeros((k, k), dtype=np.int64)
    np.add.at(cells, (labs, preds), 1)
    names = tuple(class_names) if class_names is not None else tuple(str(i) for i in range(k))
    return ConfusionMatrix(names, cells)


@dataclass(frozen=True)
class ClassMetrics:
    name: str
    precision: float | Fraction
    recall: float | Fraction
    f1: float | Fraction
    support: int
    zero_denominator: tuple[str, ...] = ()


def one_vs_rest(cm: ConfusionMatrix, i: int) -> tuple[int, int, int, int]:
    """(TP, FP, FN, TN) for class ``i`` against all others."""
    cells = cm.cells
    tp = int(cells[i, i])
    fp = int(cells[:, i].sum()) - tp
    fn = int(cells[i, :].sum()) - tp
    tn = cm.total - tp - fp - fn
    return tp, fp, fn, tn


def _ratio(num: int, den: int) -> Fraction | None:
    return Fraction(num, den) if den else None


def per_class_metrics(cm: ConfusionMatrix, exact: bool = False) -> list[ClassMetrics]:
    """One-vs-rest precision, recall and F1 per class.

    A zero denominator yields 0 and names the metric in ``zero_denominator``.
    With ``exact`` the values are Fractions.
    """
    out = []
    for i, name in enumerate(cm.class_names):
        tp, fp, fn, _ = one_vs_rest(cm, i)
        flags = []
        p = _ratio(tp, tp + fp)
        r = _ratio(tp, tp + fn)
        if p is None:
            flags.append("precision")
            p = Fraction(0)
        if r is None:
            flags.append("recall")
            r = Fraction(0)
        if p + r == 0:
            flags.append("f1")
            f1 = Fraction(0)
        else:
            f1 = 2 * p * r / (p + r)
        conv = (lambda v: v) if exact else float
        out.append(ClassMetrics(name, conv(p), conv(r), conv(f1), tp + fn, tuple(flags)))
    return out


def accuracy(cm: ConfusionMatrix, exact: bool = False) -> float | Fraction:
    """trace / total."""
    if cm.total == 0:
        raise MetricsError("accuracy of an empty confusion matrix is undefined")
    acc = Fraction(int(np.trace(cm.cells)), cm.total)
    return acc if exact else float(acc)


# --------------------------------------------------------------------------
# reports


def config_fingerprint(config: dict) -> str:
    blob = json.dumps(config, sort_keys=True, separators=(",", ":")).encode("utf-8")
    return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class ClassificationReport:
    task: str
    accuracy: float
    classes: list[ClassMetrics]
    confusion: ConfusionMatrix | None = None
    config_fingerprint: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_confusion(cls, cm: ConfusionMatrix, task: str, config: dict | None = None) -> "ClassificationReport":
        return cls(
            task=task,
            accuracy=accuracy(cm),
            classes=per_class_metrics(cm),
            confusion=cm,
            config_fingerprint=config_fingerprint(config) if config is not None else "",
        )

    def to_dict(self) -> dict:
        return {
            "task": self.task,
            "accuracy": self.accuracy,
            "classes": [
                {
                    "name": c.name,
                    "precision": float(c.precision),
                    "recall": float(c.recall),
                    "f1": float(c.f1),
                    "support": c.support,
                    "zero_denominator_flags": list(c.zero_denominator),
                }
                for c in self.classes
            ],
            "confusion_matrix": self.confusion.cells.tolist() if self.confusion is not None else [],
            "config_fingerprint": self.config_fingerprint,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "ClassificationReport":
        try:
            classes = [
                ClassMetrics(c["name"], c["precision"], c["recall"], c["f1"], int(c["support"]),
                             tuple(c.get("zero_denominator_flags", ())))
                for c in d["classes"]
            ]
            cells = d.get("confusion_matrix") or []
            cm = None
            if cells:
                cm = ConfusionMatrix(tuple(c.name for c in classes), np.asarray(cells, dtype=np.int64))
            return cls(d["task"], float(d["accuracy"]), classes, cm, d.get("config_fingerprint", ""))
        except (KeyError, TypeError) as exc:
            raise MetricsError(f"malformed report: {exc}") from exc

    @classmethod
    def from_json(cls, text: str) -> "ClassificationReport":
        return cls.from_dict(json.loads(text))

    def display(self) -> str:
        """Two-decimal table in the usual precision/recall/F1/support layout."""
        lines = [f"{'class':<22}{'precision':>10}{'recall':>8}{'f1':>8}{'support':>9}"]
        for c in self.classes:
            lines.append(f"{c.name:<22}{float(c.precision):>10.2f}{float(c.recall):>8.2f}{float(c.f1):>8.2f}{c.support:>9d}")
        lines.append(f"accuracy {100 * self.accuracy:.2f}%")
        return "\n".join(lines)


def compare_reports(a: ClassificationReport, b: ClassificationReport) -> dict:
    """Deltas ``b - a`` for accuracy and every per-class metric."""
    names_a = [c.name for c in a.classes]
    names_b = [c.name for c in b.classes]
    if sorted(names_a) != sorted(names_b):
        raise MetricsError(f"reports cover different classes: {names_a} vs {names_b}")
    by_name = {c.name: c for c in b.classes}
    classes = []
    for ca in a.classes:
        cb = by_name[ca.name]
        classes.append(
            {
                "name": ca.name,
                "precision": float(cb.precision) - float(ca.precision),
                "recall": float(cb.recall) - float(ca.recall),
                "f1": float(cb.f1) - float(ca.f1),
                "support": cb.support - ca.support,
            }
        )
    return {"accuracy": b.accuracy - a.accuracy, "classes": classes}
