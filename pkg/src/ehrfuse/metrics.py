"""Classification and ranking metrics for multilabel disease predictions."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np
from scipy.stats import rankdata

from .records import ValidationError


@dataclass
class PredictionSet:
    """Aligned (n_samples, n_labels) arrays of targets, scores, and bits."""

    targets: np.ndarray
    scores: np.ndarray
    bits: np.ndarray

    def __post_init__(self):
        self.targets = np.asarray(self.targets, dtype=np.int64)
        self.scores = np.asarray(self.scores, dtype=np.float64)
        self.bits = np.asarray(self.bits, dtype=np.int64)
        if self.targets.ndim != 2:
            raise ValidationError("prediction set arrays must be 2-D")
        if self.targets.shape != self.scores.shape or self.targets.shape != self.bits.shape:
            raise ValidationError(
                f"mismatched prediction set shapes: targets {self.targets.shape}, "
                f"scores {self.scores.shape}, bits {self.bits.shape}"
            )
        for name, arr in (("targets", self.targets), ("bits", self.bits)):
            if not np.isin(arr, (0, 1)).all():
                raise ValidationError(f"{name} must be binary")

    @property
    def n_samples(self) -> int:
        return self.targets.shape[0]

    @property
    def n_labels(self) -> int:
        return self.targets.shape[1]


@dataclass
class MetricReport:
    precision: float = 0.0
    recall: float = 0.0
    f1_macro: float = 0.0
    f1_weighted: float = 0.0
    accuracy: float = 0.0
    recall_at_k: dict[int, float] = field(default_factory=dict)
    ndcg_at_k: dict[int, float] = field(default_factory=dict)
    ranking_skipped: int = 0
    auc: float | None = None
    subset_accuracy: float | None = None
    per_label: list[dict] | None = None

    def to_json(self) -> str:
        obj = {
            "precision": self.precision,
            "recall": self.recall,
            "f1_macro": self.f1_macro,
            "f1_weighted": self.f1_weighted,
            "accuracy": self.accuracy,
            "recall_at_k": {str(k): v for k, v in self.recall_at_k.items()},
            "ndcg_at_k": {str(k): v for k, v in self.ndcg_at_k.items()},
            "ranking_skipped": self.ranking_skipped,
            "auc": self.auc,
            "subset_accuracy": self.subset_accuracy,
            "per_label": self.per_label,
        }
        return json.dumps(obj, indent=2, sort_keys=True)

    def rows(self) -> list[tuple[str, float]]:
        out = [
            ("precision", self.precision),
            ("recall", self.recall),
            ("f1_macro", self.f1_macro),
            ("f1_weighted", self.f1_weighted),
            ("accuracy", self.accuracy),
        ]
        for k in sorted(self.recall_at_k):
            out.append((f"recall_at_{k}", self.recall_at_k[k]))
        for k in sorted(self.ndcg_at_k):
            out.append((f"ndcg_at_{k}", self.ndcg_at_k[k]))
        out.append(("ranking_skipped", float(self.ranking_skipped)))
        if self.auc is not None:
            out.append(("auc", self.auc))
        if self.subset_accuracy is not None:
            out.append(("subset_accuracy", self.subset_accuracy))
        return out


def write_report_csv(report: MetricReport, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["metric", "value"])
        for name, value in report.rows():
            writer.writerow([name, repr(float(value))])
        if report.per_label is not None:
            writer.writerow([])
            writer.writerow(["label", "precision", "recall", "f1", "support"])
            for row in report.per_label:
                writer.writerow(
                    [
                        row["label"],
                        repr(row["precision"]),
                        repr(row["recall"]),
                        repr(row["f1"]),
                        row["support"],
                    ]
                )


def _prf(tp: float, fp: float, fn: float) -> tuple[float, float, float]:
    precision = tp / (tp + fp) if tp + fp > 0 else 0.0
    recall = tp / (tp + fn) if tp + fn > 0 else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall > 0 else 0.0
    return precision, recall, f1


def classification_metrics(
    pred_set: PredictionSet,
    per_label: bool = False,
    subset_accuracy: bool = False,
) -> MetricReport:
    """Macro precision/recall/F1, support-weighted F1, and cell accuracy.

    Accuracy is the fraction of correct (sample, label) cells; labels with zero
    support contribute 0 to the macro averages.
    """
    if pred_set.n_samples == 0:
        raise ValidationError("cannot compute metrics on an empty prediction set")
    t, b = pred_set.targets, pred_set.bits
    precisions, recalls, f1s, supports = [], [], [], []
    label_rows = []
    for j in range(pred_set.n_labels):
        tp = float(np.sum((b[:, j] == 1) & (t[:, j] == 1)))
        fp = float(np.sum((b[:, j] == 1) & (t[:, j] == 0)))
        fn = float(np.sum((b[:, j] == 0) & (t[:, j] == 1)))
        p, r, f1 = _prf(tp, fp, fn)
        precisions.append(p)
        recalls.append(r)
        f1s.append(f1)
        supports.append(tp + fn)
        if per_label:
            label_rows.append(
                {"label": j, "precision": p, "recall": r, "f1": f1, "support": int(tp + fn)}
            )
    total_support = sum(supports)
    weighted = (
        sum(f * s for f, s in zip(f1s, supports)) / total_support if total_support > 0 else 0.0
    )
    report = MetricReport(
        precision=float(np.mean(precisions)),
        recall=float(np.mean(recalls)),
        f1_macro=float(np.mean(f1s)),
        f1_weighted=float(weighted),
        accuracy=float(np.mean(b == t)),
        per_label=label_rows if per_label else None,
    )
    if subset_accuracy:
        report.subset_accuracy = float(np.mean((b == t).all(axis=1)))
    return report


def top_k_indices(scores_row: np.ndarray, k: int) -> np.ndarray:
    """Highest-scored label indices; ties broken toward the lower index."""
    return np.argsort(-scores_row, kind="stable")[:k]


def _check_k(pred_set: PredictionSet, k: int) -> None:
    if not 1 <= k <= pred_set.n_labels:
        raise ValidationError(f"k must be in [1, {pred_set.n_labels}], got {k}")


def recall_at_k(pred_set: PredictionSet, k: int) -> float:
    """Mean over samples of |relevant ∩ top-k| / |relevant|, skipping samples
    with no relevant labels."""
    _check_k(pred_set, k)
    values = []
    for i in range(pred_set.n_samples):
        relevant = pred_set.targets[i]
        n_rel = int(relevant.sum())
        if n_rel == 0:
            continue
        top = top_k_indices(pred_set.scores[i], k)
        values.append(float(relevant[top].sum()) / n_rel)
    if not values:
        raise ValidationError("every sample has an empty relevant set")
    return float(np.mean(values))


def ndcg_at_k(pred_set: PredictionSet, k: int) -> float:
    """Binary-relevance NDCG: position-discounted gain of the top-k ranking
    normalized by the ideal ordering's gain over all relevant items."""
    _check_k(pred_set, k)
    values = []
    for i in range(pred_set.n_samples):
        relevant = pred_set.targets[i]
        n_rel = int(relevant.sum())
        if n_rel == 0:
            continue
        top = top_k_indices(pred_set.scores[i], k)
        gains = relevant[top].astype(np.float64)  # 2^rel - 1 is rel for binary
        discounts = np.log2(np.arange(2, k + 2, dtype=np.float64))
        dcg = float(np.sum(gains / discounts))
        idcg = float(np.sum(1.0 / np.log2(np.arange(2, n_rel + 2, dtype=np.float64))))
        values.append(dcg / idcg)
    if not values:
        raise ValidationError("every sample has an empty relevant set")
    return float(np.mean(values))


def ranking_skipped_count(pred_set: PredictionSet) -> int:
    return int(np.sum(pred_set.targets.sum(axis=1) == 0))


def auc_score(targets: np.ndarray, scores: np.ndarray) -> float:
    """Rank-based AUC with average ranks for ties (equals pair counting)."""
    t = np.asarray(targets, dtype=np.int64).ravel()
    s = np.asarray(scores, dtype=np.float64).ravel()
    if t.shape != s.shape:
        raise ValidationError("targets and scores must have the same length")
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValidationError("AUC needs at least one positive and one negative")
    ranks = rankdata(s, method="average")
    return float((ranks[t == 1].sum() - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def evaluate_predictions(
    pred_set: PredictionSet,
    k_list=(1, 2, 3, 4, 5),
    with_auc: bool = False,
    per_label: bool = False,
    subset_accuracy: bool = False,
) -> MetricReport:
    """Full report: classification block plus Recall@k / NDCG@k for each
    feasible k, and AUC for single-label (binary) sets when requested."""
    report = classification_metrics(
        pred_set, per_label=per_label, subset_accuracy=subset_accuracy
    )
    feasible = [k for k in k_list if 1 <= k <= pred_set.n_labels]
    if feasible and ranking_skipped_count(pred_set) < pred_set.n_samples:
        for k in feasible:
            report.recall_at_k[k] = recall_at_k(pred_set, k)
            report.ndcg_at_k[k] = ndcg_at_k(pred_set, k)
    report.ranking_skipped = ranking_skipped_count(pred_set)
    if with_auc:
        n_pos = int(pred_set.targets[:, 0].sum())
        if 0 < n_pos < pred_set.n_samples:
            report.auc = auc_score(pred_set.targets[:, 0], pred_set.scores[:, 0])
    return report
