"""Confusion matrices, classification scores, byte accounting and CSV output."""
from __future__ import annotations

import csv
import io
from collections import defaultdict
from dataclasses import dataclass, field

import numpy as np

from .numerics import ParameterError

__all__ = [
    "ConfusionMatrix",
    "MetricReport",
    "RunReport",
    "confusion",
    "report",
    "byte_accounting",
    "metrics_table_csv",
    "confusion_csv",
    "confusion_text",
]

METRIC_ROWS = (
    ("accuracy", "Anomaly Detection Accuracy"),
    ("precision", "Anomaly Detection Precision"),
    ("recall", "Anomaly Detection Recall"),
    ("f1", "Anomaly Detection F-Score"),
)


@dataclass(frozen=True)
class ConfusionMatrix:
    counts: np.ndarray  # rows = true class, cols = predicted class

    @property
    def c(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


@dataclass
class MetricReport:
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: list[dict] = field(default_factory=list)

    def as_dict(self) -> dict:
        return {"accuracy": self.accuracy, "precision": self.precision,
                "recall": self.recall, "f1": self.f1}


@dataclass
class RunReport:
    """Everything one simulated experiment produces."""
    protocol: str
    objective: list[float]  # F(W) at rounds 0..T
    bytes_per_round: list[int]  # cumulative
    sim_ms_per_round: list[float]  # cumulative
    node_reports: list[MetricReport]
    average: MetricReport
    confusion: ConfusionMatrix
    total_bytes: int
    messages: int
    simulated_ms: float
    wall_seconds: float
    threshold: float = float("nan")
    anomaly_flag_rate: float = float("nan")

    def rounds(self):
        for t, f in enumerate(self.objective):
            yield {
                "round": t,
                "objective": f,
                "bytes": self.bytes_per_round[t],
                "sim_ms": self.sim_ms_per_round[t],
            }


def confusion(true_labels, predicted_labels, c: int) -> ConfusionMatrix:
    t = np.asarray(true_labels, dtype=np.int64)
    p = np.asarray(predicted_labels, dtype=np.int64)
    if t.shape != p.shape:
        raise ParameterError(f"length mismatch: {t.shape[0]} true vs {p.shape[0]} predicted")
    if t.size and (max(t.max(), p.max()) >= c or min(t.min(), p.min()) < 0):
        raise ParameterError(f"labels must lie in [0, {c})")
    counts = np.zeros((c, c), dtype=np.int64)
    np.add.at(counts, (t, p), 1)
    return ConfusionMatrix(counts)


def _div(a, b):
    return a / b if b > 0 else 0.0


def report(cm: ConfusionMatrix) -> MetricReport:
    """Accuracy plus precision/recall/F1.

    Two classes: scores of the positive (index 1) class. More classes:
    unweighted macro average. Any zero denominator yields 0.
    """
    n = cm.counts
    total = n.sum()
    if total <= 0:
        raise ParameterError("confusion matrix is empty")
    tp = np.diag(n).astype(np.float64)
    pred = n.sum(axis=0)
    true = n.sum(axis=1)
    per = []
    for k in range(cm.c):
        p, r = _div(tp[k], pred[k]), _div(tp[k], true[k])
        per.append({"class": k, "precision": p, "recall": r, "f1": _div(2 * p * r, p + r),
                    "support": int(true[k])})
    if cm.c == 2:
        p, r = per[1]["precision"], per[1]["recall"]
    else:
        p = float(np.mean([d["precision"] for d in per]))
        r = float(np.mean([d["recall"] for d in per]))
    return MetricReport(float(tp.sum() / total), p, r, _div(2 * p * r, p + r), per)


def byte_accounting(messages) -> dict[int, int]:
    """Sum payload bytes per round.

    ``messages`` is an iterable of objects with ``round`` and ``n_bytes``
    attributes, or of ``(round, n_bytes)`` pairs.
    """
    out: dict[int, int] = defaultdict(int)
    for m in messages:
        rnd, nb = (m.round, m.n_bytes) if hasattr(m, "n_bytes") else m
        out[int(rnd)] += int(nb)
    return dict(sorted(out.items()))


def metrics_table_csv(columns: dict[str, MetricReport], extra: dict[str, dict] | None = None) -> str:
    """Metric rows by scenario columns, one row per detection metric."""
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    names = list(columns)
    w.writerow(["metric", *names])
    for key, label in METRIC_ROWS:
        w.writerow([label, *(f"{getattr(columns[n], key):.6f}" for n in names)])
    if extra:
        keys = []
        for d in extra.values():
            keys.extend(k for k in d if k not in keys)
        for k in keys:
            w.writerow([k, *(_fmt(extra.get(n, {}).get(k, "")) for n in names)])
    return buf.getvalue()


def _fmt(x):
    if isinstance(x, float):
        return f"{x:.6f}"
    return str(x)


def confusion_csv(cm: ConfusionMatrix, class_names) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["true\\pred", *class_names])
    for name, row in zip(class_names, cm.counts):
        w.writerow([name, *(int(x) for x in row)])
    return buf.getvalue()


def confusion_text(cm: ConfusionMatrix, class_names) -> str:
    names = [str(c) for c in class_names]
    width = max(max(len(s) for s in names), len(str(cm.counts.max())), 4) + 2
    lines = ["true \\ pred".ljust(width) + "".join(s.rjust(width) for s in names)]
    for name, row in zip(names, cm.counts):
        lines.append(name.ljust(width) + "".join(str(int(x)).rjust(width) for x in row))
    return "\n".join(lines) + "\n"
