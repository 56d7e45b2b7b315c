"""Confusion matrices, the four classification metrics, and model comparison.

The positive class is 1 (anomalous).  Any metric whose denominator is zero
is reported as 0.
"""

from __future__ import annotations

import csv
import io
import logging
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np

from .dataset import Dataset, scenario_of

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("Model", "Accuracy", "Precision", "Recall", "F1-Score")


@dataclass(frozen=True)
class ConfusionMatrix:
    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def block(self) -> str:
        """Plain-text 2x2 block, rows = true class, columns = predicted class."""
        w = max(len(str(v)) for v in (self.tp, self.tn, self.fp, self.fn, "predicted"))
        return "\n".join(
            [
                f"{'':>12} {'pred 0':>{w}} {'pred 1':>{w}}",
                f"{'true 0':>12} {self.tn:>{w}} {self.fp:>{w}}",
                f"{'true 1':>12} {self.fn:>{w}} {self.tp:>{w}}",
            ]
        )


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float


def confusion(predictions: Sequence[int], truth: Sequence[int]) -> ConfusionMatrix:
    p = np.asarray(predictions, dtype=np.int64)
    t = np.asarray(truth, dtype=np.int64)
    if p.shape != t.shape:
        raise ValueError(f"{p.size} predictions for {t.size} labels")
    if not (np.isin(p, (0, 1)).all() and np.isin(t, (0, 1)).all()):
        raise ValueError("labels must be 0 or 1")
    return ConfusionMatrix(
        tp=int(np.sum((p == 1) & (t == 1))),
        tn=int(np.sum((p == 0) & (t == 0))),
        fp=int(np.sum((p == 1) & (t == 0))),
        fn=int(np.sum((p == 0) & (t == 1))),
    )


def _ratio(num: float, den: float) -> float:
    return num / den if den else 0.0


def f1_score(precision: float, recall: float) -> float:
    return _ratio(2 * recall * precision, recall + precision)


def metrics(matrix: ConfusionMatrix) -> Metrics:
    if matrix.total == 0:
        raise ValueError("cannot score an empty confusion matrix")
    precision = _ratio(matrix.tp, matrix.tp + matrix.fp)
    recall = _ratio(matrix.tp, matrix.tp + matrix.fn)
    return Metrics(
        accuracy=(matrix.tp + matrix.tn) / matrix.total,
        precision=precision,
        recall=recall,
        f1=f1_score(precision, recall),
    )


@dataclass
class EvalReport:
    model: str
    matrix: ConfusionMatrix
    metrics: Metrics
    # scenario tag -> recall among that scenario's test samples
    recall_by_scenario: dict[str, float] = field(default_factory=dict)

    def to_text(self) -> str:
        m = self.metrics
        lines = [
            f"model: {self.model}",
            "",
            "confusion matrix (positive = anomalous):",
            self.matrix.block(),
            "",
            f"accuracy:  {100 * m.accuracy:.1f}%",
            f"precision: {m.precision:.3f}",
            f"recall:    {m.recall:.3f}",
            f"f1-score:  {m.f1:.3f}",
        ]
        if self.recall_by_scenario:
            lines += ["", "recall by attack intensity:"]
            lines += [f"  {tag}: {r:.3f}" for tag, r in self.recall_by_scenario.items()]
        return "\n".join(lines) + "\n"


def evaluate(forest, test: Dataset, model: str = "model") -> EvalReport:
    """Predict every test sample with ``forest`` and score the result."""
    return score(model, forest.predict(test.features()), test)


def score(model: str, predictions: Sequence[int], test: Dataset) -> EvalReport:
    """Score predictions on ``test``; recall is also broken down by provenance scenario."""
    truth = test.labels()
    pred = np.asarray(predictions, dtype=np.int64)
    matrix = confusion(pred, truth)
    report = EvalReport(model, matrix, metrics(matrix))
    if not test.provenance or any(not p for p in test.provenance):
        log.warning("test set lacks provenance; per-intensity breakdown omitted")
        return report
    tags = np.array([scenario_of(p) for p in test.provenance])
    for tag in sorted(set(tags[truth == 1])):
        sel = (tags == tag) & (truth == 1)
        report.recall_by_scenario[tag] = float(np.mean(pred[sel] == 1))
    return report


@dataclass
class Comparison:
    rows: list[tuple[str, Metrics]]
    best: str
    tie: bool = False

    def to_csv(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(TABLE_COLUMNS)
        for name, m in self.rows:
            writer.writerow([name, f"{100 * m.accuracy:.1f}", f"{m.precision:.3f}", f"{m.recall:.3f}", f"{m.f1:.3f}"])
        return buf.getvalue()

    def to_text(self) -> str:
        widths = [max(len(TABLE_COLUMNS[0]), *(len(n) for n, _ in self.rows))] + [len(c) for c in TABLE_COLUMNS[1:]]
        out = ["  ".join(c.ljust(w) for c, w in zip(TABLE_COLUMNS, widths))]
        for name, m in self.rows:
            cells = [name, f"{100 * m.accuracy:.1f}", f"{m.precision:.3f}", f"{m.recall:.3f}", f"{m.f1:.3f}"]
            out.append("  ".join(c.ljust(w) for c, w in zip(cells, widths)))
        note = " (F1 tie, first by name)" if self.tie else ""
        out.append(f"best by F1-Score: {self.best}{note}")
        return "\n".join(out) + "\n"


def compare(reports: Mapping[str, EvalReport]) -> Comparison:
    """Table of per-model metrics and the model with the highest F1."""
    if not reports:
        raise ValueError("nothing to compare")
    rows = [(name, reports[name].metrics) for name in reports]
    ranked = sorted(rows, key=lambda r: (-r[1].f1, r[0]))
    tie = len(ranked) > 1 and ranked[0][1].f1 == ranked[1][1].f1
    return Comparison(rows, ranked[0][0], tie)
