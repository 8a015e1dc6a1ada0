"""Evaluation metrics: confusion matrix, accuracy, macro precision/recall/F1."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .network import EVAL_TAG, Model, predict_dataset


@dataclass
class MetricsReport:
    accuracy: float
    macro_precision: float
    macro_recall: float
    macro_f1: float
    confusion: np.ndarray      # (C, C) counts, rows = true class, cols = predicted
    n_windows: int

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "macro_precision": self.macro_precision,
            "macro_recall": self.macro_recall,
            "macro_f1": self.macro_f1,
            "n_windows": self.n_windows,
        }


def compute_metrics(y_true, y_pred, n_classes: int) -> MetricsReport:
    """Macro-averaged metrics; empty classes contribute 0 (0/0 -> 0)."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    confusion = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(confusion, (y_true, y_pred), 1)
    total = confusion.sum()
    diag = np.diag(confusion).astype(np.float64)
    col = confusion.sum(axis=0).astype(np.float64)
    row = confusion.sum(axis=1).astype(np.float64)
    with np.errstate(invalid="ignore", divide="ignore"):
        precision = np.where(col > 0, diag / col, 0.0)
        recall = np.where(row > 0, diag / row, 0.0)
        pr = precision + recall
        f1 = np.where(pr > 0, 2.0 * precision * recall / np.where(pr > 0, pr, 1.0), 0.0)
    return MetricsReport(
        accuracy=float(diag.sum() / total) if total else 0.0,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        confusion=confusion,
        n_windows=int(total),
    )


def evaluate(model: Model, cfg, windows, seed: int | None = None,
             tag: int = EVAL_TAG) -> MetricsReport:
    """Monte-Carlo predict every window and score against its label."""
    seed = cfg.seed if seed is None else seed
    preds, _ = predict_dataset(model, cfg, windows, seed, tag=tag)
    labels = [w.label for w in windows]
    return compute_metrics(labels, preds, cfg.n_classes)


def format_report(report: MetricsReport) -> str:
    lines = [
        f"windows:          {report.n_windows}",
        f"accuracy:         {report.accuracy:.4f}",
        f"macro precision:  {report.macro_precision:.4f}",
        f"macro recall:     {report.macro_recall:.4f}",
        f"macro F1:         {report.macro_f1:.4f}",
        "confusion (rows = true, cols = predicted):",
    ]
    for row in report.confusion:
        lines.append("  " + " ".join(f"{v:5d}" for v in row))
    return "\n".join(lines)


def write_metrics_file(report: MetricsReport, path):
    """Machine-readable metrics: key=value lines plus the flattened confusion."""
    with open(path, "w", encoding="utf-8") as fh:
        for key, value in report.as_dict().items():
            fh.write(f"{key}={value!r}\n")
        flat = ",".join(str(int(v)) for v in report.confusion.reshape(-1))
        fh.write(f"confusion={flat}\n")
