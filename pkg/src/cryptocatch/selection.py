"""Univariate relevance filtering with false-discovery-rate control, and
importance-based ranking of trained-model features."""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Sequence

import numpy as np
from scipy.special import ndtr
from scipy.stats import rankdata
from sklearn.base import BaseEstimator
from sklearn.feature_selection import SelectorMixin
from sklearn.utils.validation import check_is_fitted

from cryptocatch._validation import check_finite_matrix

ImportanceRanking = list[tuple[str, float]]


def mann_whitney_pvalue(values, labels) -> float:
    """Two-sided Mann-Whitney U p-value (normal approximation).

    Uses midranks with the tie-corrected variance and a 0.5 continuity
    correction. A column that is constant across both classes gets 1.0.

    :param values: feature column, finite reals
    :param labels: binary class indicator of the same length
    :raises ValueError: if only one class is present
    """
    x = np.asarray(values, dtype=float)
    y = np.asarray(labels).astype(bool)
    if x.shape != y.shape:
        raise ValueError("values and labels differ in length")
    n1 = int(y.sum())
    n2 = y.size - n1
    if n1 == 0 or n2 == 0:
        raise ValueError("both classes must be present")
    if not np.all(np.isfinite(x)):
        raise ValueError("feature column contains non-finite values")
    n = n1 + n2
    ranks = rankdata(x)
    u1 = ranks[y].sum() - n1 * (n1 + 1) / 2.0
    mu = n1 * n2 / 2.0
    _, counts = np.unique(x, return_counts=True)
    tie_term = float(np.sum(counts.astype(float) ** 3 - counts))
    var = n1 * n2 / 12.0 * ((n + 1) - tie_term / (n * (n - 1)))
    if var <= 0:
        return 1.0
    z = (abs(u1 - mu) - 0.5) / math.sqrt(var)
    if z <= 0:
        return 1.0
    return float(min(1.0, 2.0 * ndtr(-z)))


univariate_pvalue = mann_whitney_pvalue


@dataclass
class SignificanceReport:
    pvalues: np.ndarray
    adjusted: np.ndarray
    selected: np.ndarray
    names: list[str] | None = None
    alpha: float = 0.01

    def __len__(self):
        return self.pvalues.size

    def rows(self):
        names = self.names or [str(i) for i in range(len(self))]
        for name, p, q, s in zip(names, self.pvalues, self.adjusted, self.selected):
            yield name, float(p), float(q), bool(s)

    def to_csv(self, fh) -> None:
        fh.write("feature,p,p_adj,selected\n")
        for name, p, q, s in self.rows():
            fh.write(f"{name},{p:.17g},{q:.17g},{str(s).lower()}\n")


def benjamini_hochberg(pvalues, alpha: float = 0.01, names=None) -> SignificanceReport:
    """BH step-up adjustment; a feature is selected when its adjusted p < alpha."""
    p = np.asarray(pvalues, dtype=float)
    if p.size and (np.any(p < 0) or np.any(p > 1) or not np.all(np.isfinite(p))):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    adjusted = np.empty(m)
    if m:
        order = np.argsort(p, kind="stable")
        scaled = p[order] * m / np.arange(1, m + 1)
        # running minimum from the largest p downwards
        stepped = np.minimum.accumulate(scaled[::-1])[::-1]
        adjusted[order] = np.minimum(stepped, 1.0)
    return SignificanceReport(p, adjusted, adjusted < alpha, list(names) if names is not None else None, alpha)


def significance_report(X, y, alpha: float = 0.01, names=None) -> SignificanceReport:
    """Per-feature relevance report for a binary or multiclass target.

    Multiclass targets are handled one-vs-rest: each class gets its own BH
    pass and a feature keeps its smallest adjusted p-value (and the matching
    raw p-value) across classes.
    """
    X = check_finite_matrix(X)
    y = np.asarray(y)
    classes = np.unique(y)
    if classes.size < 2:
        raise ValueError("need at least two classes")
    targets = [classes[1]] if classes.size == 2 else list(classes)
    best_adj = np.full(X.shape[1], np.inf)
    best_raw = np.ones(X.shape[1])
    for cls in targets:
        mask = y == cls
        raw = np.array([mann_whitney_pvalue(X[:, j], mask) for j in range(X.shape[1])])
        adj = benjamini_hochberg(raw, alpha).adjusted
        better = adj < best_adj
        best_adj[better] = adj[better]
        best_raw[better] = raw[better]
    if X.shape[1] == 0:
        best_adj = np.empty(0)
    return SignificanceReport(best_raw, best_adj, best_adj < alpha, names, alpha)


def select_features(X, y, names: Sequence[str] | None = None, alpha: float = 0.01) -> list:
    """Names (or column indices) whose adjusted p-value is below ``alpha``."""
    X = np.asarray(X, dtype=float)
    if X.size == 0:
        return []
    if names is None:
        names = list(range(X.shape[1]))
    report = significance_report(X, y, alpha)
    return [n for n, keep in zip(names, report.selected) if keep]


def top_k_by_importance(ranking: ImportanceRanking, k: int) -> list[str]:
    """First ``k`` names by descending score, ties broken alphabetically."""
    if k < 1:
        raise ValueError("k must be >= 1")
    ordered = sorted(ranking, key=lambda item: (-item[1], item[0]))
    return [name for name, _ in ordered[:k]]


class SignificanceSelector(SelectorMixin, BaseEstimator):
    """Keep features whose BH-adjusted Mann-Whitney p-value is below ``alpha``.

    A drop-in sklearn selector, so it can sit between the window feature
    extractor and the booster in a :class:`~sklearn.pipeline.Pipeline`.
    """

    def __init__(self, alpha: float = 0.01):
        self.alpha = alpha

    def fit(self, X, y):
        names = getattr(X, "columns", None)
        X = check_finite_matrix(X)
        self.n_features_in_ = X.shape[1]
        if names is not None:
            self.feature_names_in_ = np.asarray(names, dtype=object)
        self.report_ = significance_report(
            X, y, self.alpha, list(names) if names is not None else None
        )
        self.pvalues_ = self.report_.pvalues
        self.adjusted_pvalues_ = self.report_.adjusted
        return self

    def _get_support_mask(self):
        check_is_fitted(self, "report_")
        return self.report_.selected
