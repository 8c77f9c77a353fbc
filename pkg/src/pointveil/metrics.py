"""Classification metrics and the privacy-utility scorecard.

F1 and AUC are macro-averaged (unweighted over classes); AUC uses the
rank-statistic form with midranks for ties, equivalent to trapezoidal
integration of the one-vs-rest ROC curve. The averaging choice is recorded
in the scorecard metadata so downstream readers know what they are seeing.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from pointveil import model as M
from pointveil import train as T
from pointveil.data import FrameGrid
from pointveil.losses import chamfer


@dataclass
class Metrics:
    accuracy: float
    f1_macro: float
    auc_macro: float
    confusion: np.ndarray  # (C, C) counts, rows true, columns predicted

    def as_dict(self) -> dict:
        return {
            "accuracy": self.accuracy,
            "f1_macro": self.f1_macro,
            "auc_macro": self.auc_macro,
            "confusion": self.confusion.tolist(),
        }


def binary_auc(scores: np.ndarray, positive: np.ndarray) -> float:
    """Mann-Whitney AUC with midranks; exact for tied scores."""
    n_pos = int(positive.sum())
    n_neg = len(positive) - n_pos
    if n_pos == 0 or n_neg == 0:
        return float("nan")
    ranks = rankdata(scores)
    rank_sum = ranks[positive].sum()
    return float((rank_sum - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(probs: np.ndarray, labels: np.ndarray) -> Metrics:
    """Accuracy, macro-F1, macro one-vs-rest AUC, and the confusion matrix.

    Argmax ties resolve to the lowest class index. A class with neither
    true samples nor predictions contributes an F1 of 0; classes without
    both positives and negatives are left out of the AUC mean.
    """
    probs = np.asarray(probs, dtype=np.float64)
    labels = np.asarray(labels)
    if probs.ndim != 2 or probs.shape[0] == 0:
        raise ValueError("probs must be a non-empty (batch, classes) array")
    if labels.shape != (probs.shape[0],):
        raise ValueError("labels must align with probability rows")
    n, c = probs.shape
    preds = np.argmax(probs, axis=1)
    confusion = np.zeros((c, c), dtype=np.int64)
    np.add.at(confusion, (labels, preds), 1)
    accuracy = float(np.trace(confusion) / n)

    f1s = []
    for cls in range(c):
        tp = confusion[cls, cls]
        fp = confusion[:, cls].sum() - tp
        fn = confusion[cls, :].sum() - tp
        denom = 2 * tp + fp + fn
        f1s.append(0.0 if denom == 0 else 2 * tp / denom)
    f1_macro = float(np.mean(f1s))

    aucs = [binary_auc(probs[:, cls], labels == cls) for cls in range(c)]
    valid = [a for a in aucs if not np.isnan(a)]
    auc_macro = float(np.mean(valid)) if valid else float("nan")
    return Metrics(accuracy, f1_macro, auc_macro, confusion)


def roc_curve_points(scores: np.ndarray, positive: np.ndarray) -> list[tuple[float, float]]:
    """(fpr, tpr) pairs at every distinct threshold, for external plotting."""
    order = np.argsort(-scores, kind="stable")
    positive = np.asarray(positive, bool)[order]
    n_pos = max(int(positive.sum()), 1)
    n_neg = max(int(len(positive) - positive.sum()), 1)
    tps = np.cumsum(positive)
    fps = np.cumsum(~positive)
    pts = [(0.0, 0.0)]
    sorted_scores = scores[order]
    distinct = np.flatnonzero(np.diff(sorted_scores)) if len(sorted_scores) > 1 else np.array([], int)
    for i in list(distinct) + [len(positive) - 1]:
        pts.append((fps[i] / n_neg, tps[i] / n_pos))
    return pts


def mean_chamfer(originals: list[FrameGrid], transformed: list[FrameGrid]) -> float:
    return float(np.mean([
        chamfer(a.node_coords(), b.node_coords())
        for a, b in zip(originals, transformed)]))


def privacy_utility_report(g_params: M.ModelParams, u_params: M.ModelParams,
                           ae_params: M.ModelParams, test_set: list[FrameGrid],
                           out_path: str, *,
                           g_cfg: M.ModelConfig, u_cfg: M.ModelConfig,
                           ae_cfg: M.ModelConfig,
                           csv_path: str | None = None,
                           curves_dir: str | None = None) -> dict:
    """Four-row scorecard: gesture/identity tasks on original vs anonymized.

    Also reports the mean Chamfer distance between original and anonymized
    clouds as the structure-retention proxy. Returns the scorecard dict and
    writes it as JSON (plus an optional CSV flattening and ROC dumps).
    """
    deidentified = T.autoencode_dataset(test_set, ae_params, ae_cfg)
    rows = []
    curve_jobs = []
    for task, params, cfg, labels in (
            ("gesture", g_params, g_cfg, T.labels_for(test_set, T.TASK_GESTURE)),
            ("identity", u_params, u_cfg, T.labels_for(test_set, T.TASK_IDENTITY))):
        for variant, grids in (("original", test_set), ("deidentified", deidentified)):
            probs = T.predict_probs(grids, params, cfg)
            metrics = compute_metrics(probs, labels)
            rows.append({"task": task, "variant": variant, **metrics.as_dict()})
            curve_jobs.append((task, variant, probs, labels))
    scorecard = {
        "meta": {
            "n_test": len(test_set),
            "f1_averaging": "macro",
            "auc_averaging": "macro-one-vs-rest",
        },
        "rows": rows,
        "mean_chamfer": mean_chamfer(test_set, deidentified),
    }
    with open(out_path, "w", encoding="utf-8") as fh:
        json.dump(scorecard, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if csv_path:
        with open(csv_path, "w", encoding="utf-8", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["task", "variant", "accuracy", "f1_macro", "auc_macro",
                             "mean_chamfer"])
            for row in rows:
                writer.writerow([row["task"], row["variant"], repr(row["accuracy"]),
                                 repr(row["f1_macro"]), repr(row["auc_macro"]),
                                 repr(scorecard["mean_chamfer"])])
    if curves_dir:
        import os
        os.makedirs(curves_dir, exist_ok=True)
        for task, variant, probs, labels in curve_jobs:
            for cls in range(probs.shape[1]):
                pts = roc_curve_points(probs[:, cls], labels == cls)
                path = os.path.join(curves_dir, f"roc_{task}_{variant}_class{cls}.csv")
                with open(path, "w", encoding="utf-8", newline="") as fh:
                    writer = csv.writer(fh)
                    writer.writerow(["fpr", "tpr"])
                    writer.writerows([(repr(a), repr(b)) for a, b in pts])
    return scorecard
