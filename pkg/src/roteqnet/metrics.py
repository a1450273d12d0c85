"""Confusion-matrix scores for dense label maps.

Rows of the matrix index the reference class, columns the predicted class.
Average accuracy (AA) is the mean per-class recall.
"""

from __future__ import annotations

import csv
import io

import numpy as np


def confusion_matrix(n_classes: int) -> np.ndarray:
    return np.zeros((n_classes, n_classes), dtype=np.int64)


def accumulate(cm: np.ndarray, labels: np.ndarray, predictions: np.ndarray, ignore_id: int | None = None) -> np.ndarray:
    """Add the pixel pairs of one label/prediction map to ``cm`` (returned as a new array)."""
    labels = np.asarray(labels).ravel()
    predictions = np.asarray(predictions).ravel()
    if labels.shape != predictions.shape:
        raise ValueError(f"labels and predictions differ in size: {labels.size} vs {predictions.size}")
    if ignore_id is not None:
        keep = labels != ignore_id
        labels, predictions = labels[keep], predictions[keep]
    c = cm.shape[0]
    for name, ids in (("label", labels), ("prediction", predictions)):
        if ids.size and (ids.min() < 0 or ids.max() >= c):
            raise ValueError(f"{name} id out of range [0, {c}): min {ids.min()}, max {ids.max()}")
    counts = np.bincount(labels.astype(np.int64) * c + predictions.astype(np.int64), minlength=c * c)
    return cm + counts.reshape(c, c)


def scores(cm: np.ndarray) -> dict:
    """Per-class F1, overall accuracy, average accuracy and Cohen's kappa."""
    cm = np.asarray(cm, dtype=np.float64)
    total = cm.sum()
    if total <= 0:
        raise ValueError("confusion matrix is empty")
    tp = np.diag(cm)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    denom = 2 * tp + fp + fn
    f1 = np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)
    support = cm.sum(axis=1)
    recall = np.divide(tp, support, out=np.zeros_like(tp), where=support > 0)
    present = support > 0
    oa = tp.sum() / total
    aa = recall[present].mean() if present.any() else 0.0
    p_e = (cm.sum(axis=1) * cm.sum(axis=0)).sum() / total**2
    kappa = 1.0 if p_e == 1.0 else (oa - p_e) / (1.0 - p_e)
    return {"f1": f1, "oa": float(oa), "aa": float(aa), "kappa": float(kappa)}


def report_csv(result: dict, class_names: list[str]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["metric", "value"])
    for name, f1 in zip(class_names, result["f1"]):
        writer.writerow([f"f1_{name}", f"{f1:.6f}"])
    for key in ("oa", "aa", "kappa"):
        writer.writerow([key, f"{result[key]:.6f}"])
    return buf.getvalue()


def report_table(result: dict, class_names: list[str]) -> str:
    rows = [(f"F1 {name}", f"{100 * f1:6.2f}") for name, f1 in zip(class_names, result["f1"])]
    rows += [("OA", f"{100 * result['oa']:6.2f}"), ("AA", f"{100 * result['aa']:6.2f}"), ("Kappa", f"{result['kappa']:6.3f}")]
    width = max(len(r[0]) for r in rows)
    return "\n".join(f"{name:<{width}}  {value}" for name, value in rows)
