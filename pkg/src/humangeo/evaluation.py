"""Confusion matrices, mean class accuracy and method/pooling comparisons."""

from __future__ import annotations

import csv
import itertools
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import UsageError


def confusion(predictions, labels, k: int) -> np.ndarray:
    """k x k count matrix; rows are true classes, columns predictions."""
    predictions = np.asarray(predictions, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    if predictions.shape != labels.shape:
        raise UsageError(f"{len(predictions)} predictions but {len(labels)} labels")
    for what, arr in (("prediction", predictions), ("label", labels)):
        bad = arr[(arr < 0) | (arr >= k)]
        if bad.size:
            raise UsageError(f"{what} {int(bad[0])} outside [0, {k})")
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (labels, predictions), 1)
    return cm


def per_class_accuracy(cm: np.ndarray) -> np.ndarray:
    """Recall per class; NaN for classes without test examples."""
    rows = cm.sum(axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        return np.where(rows > 0, np.diag(cm) / np.maximum(rows, 1), np.nan)


def mean_class_accuracy(cm: np.ndarray) -> float:
    """Unweighted mean of per-class recall over classes that have examples."""
    acc = per_class_accuracy(np.asarray(cm))
    present = ~np.isnan(acc)
    if not present.any():
        raise UsageError("confusion matrix has no examples")
    return float(acc[present].mean())


@dataclass
class EvalReport:
    method: str
    pooling: str
    dataset: str
    label_names: list
    confusion: np.ndarray
    per_class: np.ndarray = field(init=False)
    mca: float = field(init=False)
    empty_classes: list = field(init=False)

    def __post_init__(self):
        self.confusion = np.asarray(self.confusion, dtype=np.int64)
        self.per_class = per_class_accuracy(self.confusion)
        self.mca = mean_class_accuracy(self.confusion)
        self.empty_classes = [self.label_names[i] for i in np.flatnonzero(np.isnan(self.per_class))]


def evaluate(predictions, labels, label_names, method: str, pooling: str, dataset: str) -> EvalReport:
    cm = confusion(predictions, labels, len(label_names))
    return EvalReport(method, pooling, dataset, list(label_names), cm)


def compare(reports) -> list:
    """Pairwise mCA deltas in percentage points (``a - b``), ordered by pooling then method."""
    reports = sorted(reports, key=lambda r: (r.pooling, r.method, r.dataset))
    if len(reports) < 2:
        raise UsageError("compare needs at least two reports")
    names = reports[0].label_names
    for r in reports[1:]:
        if r.label_names != names:
            raise UsageError(f"report {r.method}/{r.pooling} uses a different class set")
    rows = []
    for a, b in itertools.combinations(reports, 2):
        rows.append({
            "method_a": a.method, "pooling_a": a.pooling, "mca_a": a.mca,
            "method_b": b.method, "pooling_b": b.pooling, "mca_b": b.mca,
            "delta_pp": 100.0 * (a.mca - b.mca),
        })
    return rows


def _fmt(x: float) -> str:
    return "nan" if x != x else f"{x:.6f}"


def write_report(report: EvalReport, out_dir) -> None:
    """``confusion.csv`` plus a one-row ``summary.csv`` and ``per_class.csv``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "confusion.csv", "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["true\\pred"] + report.label_names)
        for name, row in zip(report.label_names, report.confusion):
            w.writerow([name] + [int(v) for v in row])
    with open(out / "per_class.csv", "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["class", "accuracy", "count"])
        for name, acc, n in zip(report.label_names, report.per_class, report.confusion.sum(axis=1)):
            w.writerow([name, _fmt(acc), int(n)])
    write_summary([report], out / "summary.csv")


def write_summary(reports, path) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["method", "pooling", "dataset", "mca", "n_test", "empty_classes"])
        for r in reports:
            w.writerow([r.method, r.pooling, r.dataset, _fmt(r.mca), int(r.confusion.sum()),
                        ";".join(r.empty_classes)])


def write_comparison(rows, path) -> None:
    with open(path, "w", newline="") as fp:
        w = csv.writer(fp, lineterminator="\n")
        w.writerow(["method_a", "pooling_a", "mca_a", "method_b", "pooling_b", "mca_b", "delta_pp"])
        for r in rows:
            w.writerow([r["method_a"], r["pooling_a"], _fmt(r["mca_a"]),
                        r["method_b"], r["pooling_b"], _fmt(r["mca_b"]), f"{r['delta_pp']:.4f}"])
