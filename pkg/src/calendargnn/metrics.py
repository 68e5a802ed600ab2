"""Evaluation metrics for the three prediction tasks.

Binary: accuracy, area under the precision-recall curve (note: PR, not
ROC), F1 of the positive class, Matthews correlation. Multiclass:
accuracy, macro/micro F1, Cohen's kappa. Regression: R^2, MAE, RMSE,
Pearson r. Metrics that are undefined for an input (single-class labels,
constant targets) are reported as None and serialized as "undefined",
never silently zero; the one documented exception is MCC's conventional 0
when a confusion-matrix marginal is empty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

BINARY_METRICS = ("acc", "auc_pr", "f1", "mcc")
MULTICLASS_METRICS = ("acc", "f1_macro", "f1_micro", "kappa")
REGRESSION_METRICS = ("r2", "mae", "rmse", "pearson_r")

_METRIC_NAMES = {
    "binary": BINARY_METRICS,
    "multiclass": MULTICLASS_METRICS,
    "regression": REGRESSION_METRICS,
}


@dataclass
class MetricReport:
    kind: str  # "binary" | "multiclass" | "regression"
    values: dict[str, float | None] = field(default_factory=dict)

    def __post_init__(self):
        names = _METRIC_NAMES[self.kind]
        missing = [n for n in names if n not in self.values]
        if missing:
            raise ValueError(f"MetricReport missing {missing}")

    def as_text(self) -> str:
        """Flat key=value block, one metric per line."""
        lines = [f"kind={self.kind}"]
        for name in _METRIC_NAMES[self.kind]:
            v = self.values[name]
            lines.append(f"{name}={'undefined' if v is None else repr(v)}")
        return "\n".join(lines) + "\n"

    def csv_header(self) -> list[str]:
        return list(_METRIC_NAMES[self.kind])

    def csv_row(self) -> list[str]:
        return ["undefined" if self.values[n] is None else repr(self.values[n])
                for n in _METRIC_NAMES[self.kind]]


def mean_reports(reports: list[MetricReport]) -> MetricReport:
    """Arithmetic mean per metric; a metric is None if any input has it None."""
    if not reports:
        raise ValueError("no reports to average")
    kind = reports[0].kind
    if any(r.kind != kind for r in reports):
        raise ValueError("mixed report kinds")
    out: dict[str, float | None] = {}
    for name in _METRIC_NAMES[kind]:
        vals = [r.values[name] for r in reports]
        out[name] = None if any(v is None for v in vals) else float(np.mean(vals))
    return MetricReport(kind, out)


def binary_metrics(scores, labels) -> MetricReport:
    """Metrics for a binary task from positive-class probabilities.

    Accuracy thresholds at 0.5 (ties predict positive). AUC is the area
    under the precision-recall curve from a sweep over distinct score
    thresholds with right-constant interpolation. With single-class
    labels, AUC and MCC are undefined (None).
    """
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.intp)
    if scores.shape != labels.shape or scores.ndim != 1 or scores.size == 0:
        raise ValueError("scores and labels must be equal-length non-empty vectors")
    if not np.isin(labels, (0, 1)).all():
        raise ValueError("binary labels must be 0 or 1")

    preds = (scores >= 0.5).astype(np.intp)
    acc = float((preds == labels).mean())

    tp = int(((preds == 1) & (labels == 1)).sum())
    fp = int(((preds == 1) & (labels == 0)).sum())
    fn = int(((preds == 0) & (labels == 1)).sum())
    tn = int(((preds == 0) & (labels == 0)).sum())
    f1 = 2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0

    single_class = labels.min() == labels.max()
    if single_class:
        mcc = None
        auc = None
    else:
        denom = (tp + fp) * (tp + fn) * (tn + fp) * (tn + fn)
        mcc = 0.0 if denom == 0 else (tp * tn - fp * fn) / math.sqrt(denom)
        auc = _pr_auc(scores, labels)
    return MetricReport("binary", {"acc": acc, "auc_pr": auc, "f1": f1, "mcc": mcc})


def _pr_auc(scores: np.ndarray, labels: np.ndarray) -> float:
    """Area under the precision-recall curve, right-constant interpolation.

    Equivalent to summing precision-weighted recall increments over the
    descending sweep of distinct score thresholds.
    """
    order = np.argsort(-scores, kind="stable")
    s = scores[order]
    y = labels[order]
    n_pos = int(labels.sum())
    tp_cum = np.cumsum(y)
    pred_cum = np.arange(1, len(y) + 1)
    # last index of each distinct-score block = one sweep point
    block_end = np.nonzero(np.diff(s, append=np.nan))[0]
    area = 0.0
    prev_recall = 0.0
    for i in block_end:
        precision = tp_cum[i] / pred_cum[i]
        recall = tp_cum[i] / n_pos
        area += (recall - prev_recall) * precision
        prev_recall = recall
    return float(area)


def multiclass_metrics(preds, labels, num_classes: int) -> MetricReport:
    """Accuracy, macro/micro F1 and Cohen's kappa over hard predictions."""
    preds = np.asarray(preds, dtype=np.intp)
    labels = np.asarray(labels, dtype=np.intp)
    if preds.shape != labels.shape or preds.ndim != 1 or preds.size == 0:
        raise ValueError("preds and labels must be equal-length non-empty vectors")
    if preds.min() < 0 or preds.max() >= num_classes or labels.min() < 0 or labels.max() >= num_classes:
        raise ValueError(f"class indices outside 0..{num_classes - 1}")
    n = preds.size
    acc = float((preds == labels).mean())

    f1s = []
    tp_total = 0
    fp_total = 0
    fn_total = 0
    for c in range(num_classes):
        tp = int(((preds == c) & (labels == c)).sum())
        fp = int(((preds == c) & (labels != c)).sum())
        fn = int(((preds != c) & (labels == c)).sum())
        f1s.append(2.0 * tp / (2 * tp + fp + fn) if (2 * tp + fp + fn) > 0 else 0.0)
        tp_total += tp
        fp_total += fp
        fn_total += fn
    f1_macro = float(np.mean(f1s))
    f1_micro = (2.0 * tp_total / (2 * tp_total + fp_total + fn_total)
                if (2 * tp_total + fp_total + fn_total) > 0 else 0.0)

    p_o = acc
    pred_marg = np.bincount(preds, minlength=num_classes) / n
    true_marg = np.bincount(labels, minlength=num_classes) / n
    p_e = float((pred_marg * true_marg).sum())
    if p_e >= 1.0:
        kappa = 1.0 if p_o == 1.0 else 0.0
    else:
        kappa = (p_o - p_e) / (1.0 - p_e)
    return MetricReport("multiclass", {"acc": acc, "f1_macro": f1_macro,
                                       "f1_micro": f1_micro, "kappa": float(kappa)})


def regression_metrics(preds, targets) -> MetricReport:
    """R^2, MAE, RMSE and Pearson r; r and R^2 undefined for constant targets."""
    preds = np.asarray(preds, dtype=np.float64)
    targets = np.asarray(targets, dtype=np.float64)
    if preds.shape != targets.shape or preds.ndim != 1 or preds.size < 2:
        raise ValueError("need at least two aligned predictions")
    err = preds - targets
    mae = float(np.abs(err).mean())
    rmse = float(math.sqrt((err * err).mean()))

    ss_tot = float(((targets - targets.mean()) ** 2).sum())
    if ss_tot == 0.0:
        r2 = None
        r = None
    else:
        r2 = 1.0 - float((err * err).sum()) / ss_tot
        sp = float(((preds - preds.mean()) ** 2).sum())
        if sp == 0.0:
            r = None
        else:
            cov = float(((preds - preds.mean()) * (targets - targets.mean())).sum())
            r = cov / math.sqrt(sp * ss_tot)
    return MetricReport("regression", {"r2": r2, "mae": mae, "rmse": rmse, "pearson_r": r})
