"""Recording-level classification metrics with abnormal as the positive class."""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import List, Optional, Sequence, Tuple

import numpy as np


@dataclass
class Metrics:
    accuracy: float
    sensitivity: float
    specificity: float
    ppv: float
    auc: float
    tp: int
    tn: int
    fp: int
    fn: int
    roc: List[Tuple[float, float, float]] = field(default_factory=list)

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn

    def to_dict(self, include_roc: bool = False) -> dict:
        d = asdict(self)
        if not include_roc:
            d.pop("roc")
        for k, v in d.items():
            if isinstance(v, float) and math.isnan(v):
                d[k] = None
        return d


def _ratio(num: int, den: int) -> float:
    return num / den if den else float("nan")


def roc_curve(scores: Sequence[float], truth: Sequence[int]) -> List[Tuple[float, float, float]]:
    """``(threshold, fpr, tpr)`` points, predicting abnormal when score >= threshold.

    Starts at ``(inf, 0, 0)``; tied scores move both rates in a single step.
    """
    s = np.asarray(scores, dtype=np.float64)
    t = np.asarray(truth, dtype=int)
    pos, neg = int(np.sum(t == 1)), int(np.sum(t == 0))
    order = np.argsort(-s, kind="stable")
    s, t = s[order], t[order]
    points = [(math.inf, 0.0, 0.0)]
    tp = fp = 0
    i = 0
    while i < len(s):
        j = i
        while j < len(s) and s[j] == s[i]:
            tp += t[j] == 1
            fp += t[j] == 0
            j += 1
        points.append((float(s[i]), _ratio(fp, neg), _ratio(tp, pos)))
        i = j
    return points


def auc_from_roc(roc: Sequence[Tuple[float, float, float]]) -> float:
    fpr = np.array([p[1] for p in roc])
    tpr = np.array([p[2] for p in roc])
    if np.any(np.isnan(fpr)) or np.any(np.isnan(tpr)):
        return float("nan")
    return float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2))


def evaluate(predicted: Sequence[int], truth: Sequence[int], scores: Optional[Sequence[float]] = None) -> Metrics:
    """Confusion-based rates plus ROC/AUC from ``scores`` (hard labels if omitted)."""
    p = np.asarray(predicted, dtype=int)
    t = np.asarray(truth, dtype=int)
    if len(p) != len(t):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(t)} labels")
    if len(p) == 0:
        raise ValueError("nothing to evaluate")
    tp = int(np.sum((p == 1) & (t == 1)))
    tn = int(np.sum((p == 0) & (t == 0)))
    fp = int(np.sum((p == 1) & (t == 0)))
    fn = int(np.sum((p == 0) & (t == 1)))
    sc = p.astype(np.float64) if scores is None else np.asarray(scores, dtype=np.float64)
    if len(sc) != len(t):
        raise ValueError("length mismatch between scores and labels")
    roc = roc_curve(sc, t)
    single_class = tp + fn == 0 or tn + fp == 0
    auc = float("nan") if single_class else auc_from_roc(roc)
    return Metrics(
        accuracy=(tp + tn) / len(t),
        sensitivity=_ratio(tp, tp + fn),
        specificity=_ratio(tn, tn + fp),
        ppv=_ratio(tp, tp + fp),
        auc=auc,
        tp=tp, tn=tn, fp=fp, fn=fn,
        roc=roc,
    )


def write_metrics_json(path, metrics: Metrics, extra: Optional[dict] = None) -> None:
    d = metrics.to_dict()
    if extra:
        d.update(extra)
    with open(path, "w") as fh:
        json.dump(d, fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_roc_csv(path, roc: Sequence[Tuple[float, float, float]]) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["threshold", "fpr", "tpr"])
        for thr, fpr, tpr in roc:
            w.writerow([repr(float(thr)), repr(float(fpr)), repr(float(tpr))])
