"""Classification metrics and decision-threshold selection."""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Literal

import numpy as np
import pandas as pd

PolicyKind = Literal["optimal_f1", "optimal_sensitivity"]
POLICY_ALIASES = {"f1": "optimal_f1", "sensitivity": "optimal_sensitivity"}


@dataclass(frozen=True)
class PRF:
    tp: int
    fp: int
    fn: int
    tn: int
    precision: float
    recall: float
    f1: float

    def as_dict(self) -> dict:
        return {k: getattr(self, k) for k in ("tp", "fp", "fn", "tn", "precision", "recall", "f1")}


def _scored(scores, truth):
    s = np.asarray(scores, dtype=float).ravel()
    t = np.asarray(truth).astype(bool).ravel()
    if s.size == 0:
        raise ValueError("no samples")
    if s.shape != t.shape:
        raise ValueError("scores and truth differ in length")
    if not np.all(np.isfinite(s)):
        raise ValueError("scores must be finite")
    return s, t


def _prf(tp, fp, fn, tn) -> PRF:
    precision = tp / (tp + fp) if tp + fp else 0.0
    recall = tp / (tp + fn) if tp + fn else 0.0
    f1 = 2 * precision * recall / (precision + recall) if precision + recall else 0.0
    return PRF(int(tp), int(fp), int(fn), int(tn), precision, recall, f1)


def confusion_and_prf(scores, truth, threshold: float) -> PRF:
    """Counts and precision/recall/F1 under the rule ``score > threshold``."""
    if not 0.0 <= threshold <= 1.0:
        raise ValueError("threshold must lie in [0, 1]")
    s, t = _scored(scores, truth)
    pred = s > threshold
    tp = int(np.sum(pred & t))
    fp = int(np.sum(pred & ~t))
    fn = int(np.sum(~pred & t))
    return _prf(tp, fp, fn, t.size - tp - fp - fn)


@dataclass
class RocCurve:
    fpr: np.ndarray
    tpr: np.ndarray
    thresholds: np.ndarray
    auc: float

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame({"threshold": self.thresholds, "fpr": self.fpr, "tpr": self.tpr})


def roc_auc(scores, truth) -> RocCurve:
    """ROC points at every distinct score cut, AUC by the trapezoid rule.

    Equal scores are grouped into one cut, so ties contribute half credit.
    """
    s, t = _scored(scores, truth)
    n_pos = int(t.sum())
    n_neg = t.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise ValueError("both classes must be present")
    order = np.argsort(-s, kind="stable")
    s_sorted, t_sorted = s[order], t[order]
    # last index of each run of equal scores
    ends = np.r_[np.flatnonzero(np.diff(s_sorted) != 0), s.size - 1]
    tps = np.cumsum(t_sorted)[ends]
    fps = (ends + 1) - tps
    tpr = np.r_[0.0, tps / n_pos]
    fpr = np.r_[0.0, fps / n_neg]
    thresholds = np.r_[np.inf, s_sorted[ends]]
    auc = float(np.sum(np.diff(fpr) * (tpr[1:] + tpr[:-1]) / 2.0))
    return RocCurve(fpr, tpr, thresholds, auc)


def mlogloss(onehot, proba, eps: float = 1e-15) -> float:
    """Mean multiclass cross-entropy with probabilities clamped to [eps, 1-eps]."""
    y = np.asarray(onehot, dtype=float)
    p = np.clip(np.asarray(proba, dtype=float), eps, 1.0 - eps)
    if y.shape != p.shape or y.ndim != 2:
        raise ValueError("onehot and proba must be matching 2-D arrays")
    return float(-np.sum(y * np.log(p)) / y.shape[0])


def threshold_grid(step: float = 0.01) -> np.ndarray:
    if not 0.0 < step <= 0.5:
        raise ValueError("step must lie in (0, 0.5]")
    n = int(math.floor(1.0 / step + 1e-9))
    grid = np.round(np.arange(n + 1) * step, 10)
    if grid[-1] < 1.0:
        grid = np.r_[grid, 1.0]
    return grid


def sweep_thresholds(scores, truth, step: float = 0.01) -> pd.DataFrame:
    """Precision, recall and F1 at thresholds 0, step, ..., 1."""
    s, t = _scored(scores, truth)
    rows = []
    for thr in threshold_grid(step):
        m = confusion_and_prf(s, t, float(thr))
        rows.append((float(thr), m.precision, m.recall, m.f1))
    return pd.DataFrame(rows, columns=["threshold", "precision", "recall", "f1"])


@dataclass
class ThresholdPolicy:
    kind: str
    threshold: float
    precision: float
    recall: float
    f1: float
    f1_floor_ratio: float = 0.99
    max_f1: float = field(default=float("nan"))

    def as_dict(self) -> dict:
        return {
            "policy": self.kind,
            "threshold": self.threshold,
            "precision": self.precision,
            "recall": self.recall,
            "f1": self.f1,
            "f1_floor_ratio": self.f1_floor_ratio,
            "max_f1": self.max_f1,
        }


def pick_threshold(table: pd.DataFrame, kind: str = "optimal_f1", f1_floor_ratio: float = 0.99) -> ThresholdPolicy:
    """Choose a threshold from a sweep table.

    ``optimal_f1`` takes the F1 argmax (smallest threshold on ties).
    ``optimal_sensitivity`` keeps rows whose F1 is at least
    ``f1_floor_ratio * max F1`` and among them maximizes recall, then F1,
    then prefers the smaller threshold.
    """
    kind = POLICY_ALIASES.get(kind, kind)
    if kind not in ("optimal_f1", "optimal_sensitivity"):
        raise ValueError(f"unknown policy {kind!r}")
    if not 0.0 < f1_floor_ratio <= 1.0:
        raise ValueError("f1_floor_ratio must lie in (0, 1]")
    if len(table) == 0:
        raise ValueError("empty threshold table")
    thr = table["threshold"].to_numpy(float)
    f1 = table["f1"].to_numpy(float)
    recall = table["recall"].to_numpy(float)
    best = float(f1.max())
    if kind == "optimal_f1":
        candidates = np.flatnonzero(f1 == best)
        i = candidates[np.argmin(thr[candidates])]
    else:
        ok = np.flatnonzero(f1 >= f1_floor_ratio * best)
        # lexsort: last key is primary
        i = ok[np.lexsort((thr[ok], -f1[ok], -recall[ok]))[0]]
    row = table.iloc[int(i)]
    return ThresholdPolicy(
        kind, float(row["threshold"]), float(row["precision"]), float(row["recall"]),
        float(row["f1"]), f1_floor_ratio, best,
    )
