"""Weighted / per-class F1, confusion matrices and gate-weight statistics."""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np


def confusion_matrix(labels, predictions, class_count: int) -> np.ndarray:
    """Counts with rows = true class, columns = predicted class."""
    y = np.asarray(labels, dtype=np.int64)
    p = np.asarray(predictions, dtype=np.int64)
    if y.shape != p.shape:
        raise ValueError("labels and predictions differ in length")
    cm = np.zeros((class_count, class_count), dtype=np.int64)
    np.add.at(cm, (y, p), 1)
    return cm


@dataclass(frozen=True)
class PerClassF1:
    f1: np.ndarray          # (|Y|,)
    support: np.ndarray     # true-class counts
    absent: np.ndarray      # class neither true nor predicted anywhere


def per_class_f1(labels, predictions, class_count: int) -> PerClassF1:
    cm = confusion_matrix(labels, predictions, class_count).astype(float)
    tp = np.diag(cm)
    pred_count = cm.sum(axis=0)
    support = cm.sum(axis=1)
    # F1 = 2TP / (2TP + FP + FN), which is 0 exactly when precision + recall = 0
    denom = pred_count + support
    f1 = np.divide(2.0 * tp, denom, out=np.zeros(class_count), where=denom > 0)
    return PerClassF1(f1, support.astype(np.int64), denom == 0)


def weighted_f1(labels, predictions, class_count: int) -> float:
    """Support-weighted mean of per-class F1."""
    if len(labels) == 0:
        raise ValueError("weighted_f1 of an empty prediction set")
    pc = per_class_f1(labels, predictions, class_count)
    return float(np.dot(pc.f1, pc.support) / pc.support.sum())


@dataclass
class GateStats:
    means: np.ndarray                 # (3,)
    histograms: np.ndarray            # (3, bins), counts over [0, 1]
    per_class_means: np.ndarray       # (|Y|, 3), NaN for classes without records
    count: int

    def to_dict(self) -> dict:
        return {"means": self.means.tolist(), "histograms": self.histograms.tolist(),
                "per_class_means": [[None if np.isnan(x) else float(x) for x in row] for row in self.per_class_means],
                "count": self.count}


def gate_stats(betas, labels=None, class_count: int | None = None, bins: int = 10) -> GateStats:
    betas = np.atleast_2d(np.asarray(betas, dtype=float))
    if betas.shape[-1] != 3:
        raise ValueError("gate records need three weights per utterance")
    hist = np.stack([np.histogram(betas[:, j], bins=bins, range=(0.0, 1.0))[0] for j in range(3)])
    if labels is not None:
        labels = np.asarray(labels, dtype=np.int64)
        k = class_count if class_count is not None else int(labels.max()) + 1
        per_class = np.full((k, 3), np.nan)
        for c in range(k):
            sel = labels == c
            if sel.any():
                per_class[c] = betas[sel].mean(axis=0)
    else:
        per_class = np.zeros((0, 3))
    return GateStats(betas.mean(axis=0), hist, per_class, len(betas))


def metrics_document(labels, predictions, class_count: int, gate_means=None) -> dict:
    pc = per_class_f1(labels, predictions, class_count)
    return {
        "weighted_f1": weighted_f1(labels, predictions, class_count),
        "per_class_f1": pc.f1.tolist(),
        "confusion": confusion_matrix(labels, predictions, class_count).tolist(),
        "gate_means": None if gate_means is None else [float(x) for x in gate_means],
    }


def write_metrics_json(doc: dict, path) -> None:
    Path(path).write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def write_confusion_csv(cm: np.ndarray, class_names: Sequence[str], path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["true\\pred", *class_names])
        for name, row in zip(class_names, np.asarray(cm)):
            w.writerow([name, *[int(x) for x in row]])
