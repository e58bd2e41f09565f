"""Classification metrics, fold aggregation and report files."""

from __future__ import annotations

import csv
import io
import json
import os
from dataclasses import dataclass

import numpy as np

from .exceptions import ContractViolation

__all__ = [
    "confusion_matrix",
    "precision_recall_f1",
    "accuracy",
    "FoldSummary",
    "aggregate_folds",
    "write_report",
]

METRIC_COLUMNS = ("precision", "recall", "f1")
CSV_COLUMNS = ("mode", "model", "fold") + METRIC_COLUMNS


def confusion_matrix(labels, preds, num_classes: int = None) -> np.ndarray:
    """Counts with rows = true class and columns = predicted class."""
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    preds = np.asarray(preds, dtype=np.int64).reshape(-1)
    if labels.shape != preds.shape:
        raise ContractViolation(f"{labels.shape[0]} labels but {preds.shape[0]} predictions")
    if labels.shape[0] == 0:
        raise ContractViolation("need at least one sample")
    C = num_classes or int(max(labels.max(), preds.max())) + 1
    cm = np.zeros((C, C), dtype=np.int64)
    np.add.at(cm, (labels, preds), 1)
    return cm


def _safe_div(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b > 0)


def _f1(p, r):
    return _safe_div(2 * p * r, p + r)


def precision_recall_f1(preds, labels, averaging: str = "macro", num_classes: int = None):
    """Precision, recall and F1.

    Macro averages per-class scores over the classes present in labels or
    predictions (or all ``num_classes`` classes when given); an undefined
    per-class precision or recall counts as 0. Micro pools the counts.
    """
    cm = confusion_matrix(labels, preds, num_classes)
    tp = np.diag(cm).astype(np.float64)
    pred_tot = cm.sum(axis=0)
    true_tot = cm.sum(axis=1)
    if averaging == "micro":
        p = float(_safe_div(tp.sum(), pred_tot.sum()))
        r = float(_safe_div(tp.sum(), true_tot.sum()))
        return p, r, float(_f1(p, r))
    if averaging != "macro":
        raise ContractViolation(f"unknown averaging {averaging!r}")
    present = np.ones(cm.shape[0], dtype=bool) if num_classes else (pred_tot + true_tot) > 0
    p_c = _safe_div(tp, pred_tot)[present]
    r_c = _safe_div(tp, true_tot)[present]
    return float(p_c.mean()), float(r_c.mean()), float(_f1(p_c, r_c).mean())


def accuracy(preds, labels) -> float:
    preds = np.asarray(preds).reshape(-1)
    labels = np.asarray(labels).reshape(-1)
    return float(np.mean(preds == labels))


@dataclass(frozen=True)
class FoldSummary:
    """Fold values with mean and sample standard deviation per (model, metric)."""

    entries: dict

    def to_dict(self, decimals: int = 3) -> dict:
        out = {}
        for (model, metric), e in sorted(self.entries.items()):
            out.setdefault(model, {})[metric] = {
                "folds": [round(float(v), decimals) for v in e["folds"]],
                "mean": round(float(e["mean"]), decimals),
                "sd": round(float(e["sd"]), decimals),
            }
        return out


def aggregate_folds(per_fold_scores) -> FoldSummary:
    """Mean and ddof=1 standard deviation across folds.

    ``per_fold_scores`` is either a plain sequence of fold values (stored
    under model ``""`` and metric ``"value"``) or a mapping
    ``{(model, metric): [fold values]}``.
    """
    if not isinstance(per_fold_scores, dict):
        per_fold_scores = {("", "value"): per_fold_scores}
    entries = {}
    for key, vals in per_fold_scores.items():
        v = np.asarray(vals, dtype=np.float64)
        if v.shape[0] < 2:
            raise ContractViolation(f"{key}: need at least 2 folds, got {v.shape[0]}")
        entries[key] = {"folds": v, "mean": float(v.mean()), "sd": float(v.std(ddof=1))}
    return FoldSummary(entries)


def _fmt(v: float) -> str:
    return repr(float(v))


def _report_rows(histories):
    rows = []
    for h in histories:
        for model, metrics in h["models"]:
            rows.append((h["mode"], model, int(h["fold"])) + tuple(metrics[c] for c in METRIC_COLUMNS))
    return rows


def write_report(histories, out_dir) -> tuple:
    """Write ``metrics.csv`` and ``summary.json`` into ``out_dir``.

    Each history is a mapping with ``mode``, ``fold`` and ``models``: a list
    of ``(model_name, {"precision", "recall", "f1", ...})`` pairs.
    The summary has one FoldSummary per mode, keyed ``model -> metric``.
    """
    rows = _report_rows(histories)
    if not rows:
        raise ContractViolation("no completed runs to report")
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(CSV_COLUMNS)
    for r in rows:
        w.writerow(list(r[:3]) + [_fmt(v) for v in r[3:]])
    summary = {}
    for mode in sorted({r[0] for r in rows}):
        scores = {}
        for r in rows:
            if r[0] != mode:
                continue
            for metric, v in zip(METRIC_COLUMNS, r[3:]):
                scores.setdefault((r[1], metric), []).append(v)
        per_mode = {}
        for (model, metric), vals in sorted(scores.items()):
            v = np.asarray(vals, dtype=np.float64)
            sd = float(v.std(ddof=1)) if v.shape[0] > 1 else 0.0
            per_mode.setdefault(model, {})[metric] = {
                "folds": [round(float(x), 3) for x in v],
                "mean": round(float(v.mean()), 3),
                "sd": round(sd, 3),
            }
        summary[mode] = per_mode
    os.makedirs(out_dir, exist_ok=True)
    csv_path = os.path.join(out_dir, "metrics.csv")
    json_path = os.path.join(out_dir, "summary.json")
    with open(csv_path, "w", encoding="utf-8", newline="") as fh:
        fh.write(buf.getvalue())
    with open(json_path, "w", encoding="utf-8") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return csv_path, json_path
