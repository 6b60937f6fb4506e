"""Confusion matrices, accuracy reports and misclassification lists."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .dataset import CLASS_NAMES
from .errors import ShapeError


@dataclass
class Misclassified:
    path: str
    true: str
    predicted: str
    probabilities: tuple = ()


@dataclass
class EvalReport:
    """Rows of ``confusion`` are true classes, columns are predictions."""

    class_names: tuple
    confusion: np.ndarray
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    undefined: list = field(default_factory=list)
    misclassified: list = field(default_factory=list)

    @property
    def n(self):
        return int(self.confusion.sum())


def _as_indices(labels, class_names):
    out = []
    for v in labels:
        if isinstance(v, str):
            out.append(class_names.index(v))
        else:
            out.append(int(v))
    return np.asarray(out, dtype=np.int64)


def compute_confusion(true_labels, predicted_labels, class_names=CLASS_NAMES, paths=None, probabilities=None):
    """Build an :class:`EvalReport`. Labels may be names or indices.

    Precision or recall with a zero denominator is reported as 0 and the
    metric is listed in ``undefined``.
    """
    if len(true_labels) != len(predicted_labels):
        raise ShapeError(f"{len(true_labels)} true labels but {len(predicted_labels)} predictions")
    class_names = tuple(class_names)
    k = len(class_names)
    t = _as_indices(true_labels, class_names)
    p = _as_indices(predicted_labels, class_names)
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (t, p), 1)
    diag = np.diag(cm).astype(float)
    col, row = cm.sum(axis=0), cm.sum(axis=1)
    precision = np.divide(diag, col, out=np.zeros(k), where=col > 0)
    recall = np.divide(diag, row, out=np.zeros(k), where=row > 0)
    undefined = [f"precision:{class_names[i]}" for i in range(k) if col[i] == 0]
    undefined += [f"recall:{class_names[i]}" for i in range(k) if row[i] == 0]
    total = cm.sum()
    acc = float(np.trace(cm) / total) if total else 0.0
    wrong = []
    for i in np.flatnonzero(t != p):
        wrong.append(Misclassified(
            str(paths[i]) if paths is not None else str(i),
            class_names[t[i]],
            class_names[p[i]],
            tuple(float(v) for v in probabilities[i]) if probabilities is not None else (),
        ))
    return EvalReport(class_names, cm, acc, precision, recall, undefined, wrong)


def format_report(report, title="evaluation"):
    names = report.class_names
    width = max(len(n) for n in names) + 2
    lines = [f"{title}", f"samples: {report.n}", f"accuracy: {report.accuracy:.4f}", "",
             "confusion (rows = true, cols = predicted)",
             " " * width + "".join(f"{n:>{width}}" for n in names)]
    for i, n in enumerate(names):
        lines.append(f"{n:<{width}}" + "".join(f"{v:>{width}d}" for v in report.confusion[i]))
    lines += ["", f"{'class':<{width}}{'precision':>11}{'recall':>9}"]
    for i, n in enumerate(names):
        lines.append(f"{n:<{width}}{report.precision[i]:>11.4f}{report.recall[i]:>9.4f}")
    if report.undefined:
        lines += ["", "undefined (0/0, reported as 0): " + ", ".join(report.undefined)]
    lines += ["", f"misclassified: {len(report.misclassified)}"]
    for m in report.misclassified:
        lines.append(f"  {m.path}: {m.true} -> {m.predicted}")
    return "\n".join(lines) + "\n"


def write_report(report, out_dir, title="evaluation", figure=True):
    """Write text, CSV and (optionally) a confusion-matrix figure into ``out_dir``."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "report.txt").write_text(format_report(report, title))
    with open(out / "summary.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["samples", "accuracy", "errors"])
        w.writerow([report.n, repr(report.accuracy), len(report.misclassified)])
    with open(out / "confusion.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["true\\predicted", *report.class_names])
        for name, row in zip(report.class_names, report.confusion):
            w.writerow([name, *map(int, row)])
    with open(out / "per_class.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["class", "precision", "recall", "support"])
        for i, name in enumerate(report.class_names):
            w.writerow([name, repr(float(report.precision[i])), repr(float(report.recall[i])),
                        int(report.confusion[i].sum())])
    with open(out / "misclassified.csv", "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["path", "true", "predicted", *[f"p_{n}" for n in report.class_names]])
        for m in report.misclassified:
            w.writerow([m.path, m.true, m.predicted, *(f"{v:.6f}" for v in m.probabilities)])
    if figure:
        from .plotting import plot_confusion

        plot_confusion(report, out / "confusion.png", title=title)
    return out
