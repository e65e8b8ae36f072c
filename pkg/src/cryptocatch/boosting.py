"""Newton-boosted decision trees for binary and multiclass traffic labels.

Exact greedy split search on sorted feature values, second-order leaf
weights, per-tree row and column subsampling. Models serialize to a
self-describing JSON document.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from typing import Mapping

import numpy as np
from scipy.special import expit, softmax
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.model_selection import StratifiedGroupKFold, StratifiedKFold
from sklearn.utils.validation import check_is_fitted

from cryptocatch import metrics
from cryptocatch._validation import check_finite_matrix, check_labels, check_min_class_count

MODEL_FORMAT = "cryptocatch-gbdt"
MODEL_VERSION = 1
TIE_TOL = 1e-12


@dataclass(frozen=True)
class Hyperparams:
    gamma: float = 0.01
    max_depth: int = 4
    subsample: float = 0.819
    colsample_bytree: float = 0.514
    min_child_weight: float = 5.0
    learning_rate: float = 0.409
    num_rounds: int = 50
    reg_lambda: float = 1.0
    seed: int = 0
    early_stopping_rounds: int | None = None

    def __post_init__(self):
        checks = [
            (self.gamma >= 0, "gamma >= 0"),
            (int(self.max_depth) == self.max_depth and self.max_depth >= 1, "max_depth integer >= 1"),
            (0 < self.subsample <= 1, "subsample in (0, 1]"),
            (0 < self.colsample_bytree <= 1, "colsample_bytree in (0, 1]"),
            (self.min_child_weight >= 0, "min_child_weight >= 0"),
            (0 < self.learning_rate <= 1, "learning_rate in (0, 1]"),
            (int(self.num_rounds) == self.num_rounds and self.num_rounds >= 0, "num_rounds integer >= 0"),
            (self.reg_lambda >= 0, "reg_lambda >= 0"),
            (self.early_stopping_rounds is None or self.early_stopping_rounds >= 1, "early_stopping_rounds >= 1"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(f"invalid hyperparameter: {msg}")

    @classmethod
    def from_dict(cls, data: Mapping) -> "Hyperparams":
        data = dict(data)
        if "lambda" in data:
            data["reg_lambda"] = data.pop("lambda")
        if "colsample" in data:
            data["colsample_bytree"] = data.pop("colsample")
        unknown = set(data) - set(cls.__dataclass_fields__)
        if unknown:
            raise ValueError(f"unknown hyperparameters: {sorted(unknown)}")
        return cls(**data)

    def to_dict(self) -> dict:
        return asdict(self)


def best_split(X, g, h, reg_lambda=1.0, gamma=0.0, min_child_weight=0.0):
    """Exact greedy split for one node.

    Returns ``(gain, column, threshold)`` for the best admissible split or
    None. Ties go to the lowest column, then the lowest threshold. Rows with
    ``x < threshold`` go left.
    """
    X = np.asarray(X, dtype=float)
    n, d = X.shape
    if n < 2 or d == 0:
        return None
    order = np.argsort(X, axis=0, kind="stable")
    xs = np.take_along_axis(X, order, axis=0)
    GL = np.cumsum(g[order], axis=0)[:-1]
    HL = np.cumsum(h[order], axis=0)[:-1]
    G, H = float(g.sum()), float(h.sum())
    GR, HR = G - GL, H - HL
    valid = (xs[1:] > xs[:-1]) & (HL >= min_child_weight) & (HR >= min_child_weight)
    if not valid.any():
        return None
    with np.errstate(divide="ignore", invalid="ignore"):
        gain = 0.5 * (GL**2 / (HL + reg_lambda) + GR**2 / (HR + reg_lambda) - G**2 / (H + reg_lambda)) - gamma
    gain = np.where(valid, gain, -np.inf).T  # (d, n-1): row-major order = lowest column first
    top = gain.max()
    # gains equal up to summation-order rounding count as ties
    flat = int(np.argmax(gain >= top - TIE_TOL * max(1.0, abs(top))))
    col, pos = divmod(flat, n - 1)
    best = float(gain[col, pos])
    if not best > 0:
        return None
    lo, hi = xs[pos, col], xs[pos + 1, col]
    thr = lo + (hi - lo) / 2.0
    if not lo < thr <= hi:
        thr = hi
    return best, col, float(thr)


@dataclass
class Tree:
    """Array-encoded binary tree; ``feature == -1`` marks a leaf."""

    feature: np.ndarray
    threshold: np.ndarray
    left: np.ndarray
    right: np.ndarray
    value: np.ndarray
    gain: np.ndarray

    @property
    def n_nodes(self) -> int:
        return self.feature.size

    @property
    def depth(self) -> int:
        def walk(i):
            if self.feature[i] < 0:
                return 0
            return 1 + max(walk(self.left[i]), walk(self.right[i]))

        return walk(0)

    def predict(self, X: np.ndarray) -> np.ndarray:
        node = np.zeros(X.shape[0], dtype=np.int64)
        rows = np.arange(X.shape[0])
        while True:
            f = self.feature[node]
            inner = f >= 0
            if not inner.any():
                return self.value[node]
            go_left = X[rows[inner], f[inner]] < self.threshold[node[inner]]
            node[inner] = np.where(go_left, self.left[node[inner]], self.right[node[inner]])

    def to_dict(self) -> dict:
        return {k: getattr(self, k).tolist() for k in ("feature", "threshold", "left", "right", "value", "gain")}

    @classmethod
    def from_dict(cls, d) -> "Tree":
        ints = ("feature", "left", "right")
        return cls(**{k: np.asarray(d[k], dtype=np.int64 if k in ints else float) for k in
                      ("feature", "threshold", "left", "right", "value", "gain")})


def grow_tree(X, g, h, hp: Hyperparams, columns=None) -> Tree:
    """Grow one tree depth-first on the given rows; ``columns`` restricts splits."""
    if columns is None:
        columns = np.arange(X.shape[1])
    columns = np.asarray(columns)
    feature, threshold, left, right, value, gain = [], [], [], [], [], []

    def new_node():
        for arr, v in ((feature, -1), (threshold, 0.0), (left, -1), (right, -1), (value, 0.0), (gain, 0.0)):
            arr.append(v)
        return len(feature) - 1

    def build(rows, depth):
        i = new_node()
        gs, hs = g[rows], h[rows]
        split = None
        if depth < hp.max_depth and rows.size >= 2:
            split = best_split(X[np.ix_(rows, columns)], gs, hs, hp.reg_lambda, hp.gamma, hp.min_child_weight)
        if split is None:
            value[i] = -hp.learning_rate * float(gs.sum()) / (float(hs.sum()) + hp.reg_lambda)
            return i
        gn, col, thr = split
        f = int(columns[col])
        mask = X[rows, f] < thr
        feature[i], threshold[i], gain[i] = f, thr, gn
        left[i] = build(rows[mask], depth + 1)
        right[i] = build(rows[~mask], depth + 1)
        return i

    build(np.arange(X.shape[0]), 0)
    return Tree(
        np.asarray(feature, np.int64), np.asarray(threshold, float), np.asarray(left, np.int64),
        np.asarray(right, np.int64), np.asarray(value, float), np.asarray(gain, float),
    )


def _logloss(y01, margin):
    # log(1 + e^-m) for positives, log(1 + e^m) for negatives
    return float(np.mean(np.logaddexp(0.0, np.where(y01 == 1, -margin, margin))))


def _softmax_loss(codes, margin):
    lse = np.logaddexp.reduce(margin, axis=1)
    return float(np.mean(lse - margin[np.arange(codes.size), codes]))


class BoostedTreeClassifier(ClassifierMixin, BaseEstimator):
    """Gradient-boosted trees with logistic (2 classes) or softmax loss.

    Parameters mirror :class:`Hyperparams`. Defaults are the tuned values
    used throughout the package. ``classes_`` is sorted, so for string
    labels ``"benign" < "mining"`` the positive class is ``"mining"``.

    Attributes after fit: ``trees_`` (rounds x K lists), ``base_score_``,
    ``train_loss_`` (loss before boosting followed by one entry per round),
    ``feature_importances_`` (normalized total gain per input column).
    """

    def __init__(
        self,
        gamma=0.01,
        max_depth=4,
        subsample=0.819,
        colsample_bytree=0.514,
        min_child_weight=5.0,
        learning_rate=0.409,
        num_rounds=50,
        reg_lambda=1.0,
        seed=0,
        early_stopping_rounds=None,
    ):
        self.gamma = gamma
        self.max_depth = max_depth
        self.subsample = subsample
        self.colsample_bytree = colsample_bytree
        self.min_child_weight = min_child_weight
        self.learning_rate = learning_rate
        self.num_rounds = num_rounds
        self.reg_lambda = reg_lambda
        self.seed = seed
        self.early_stopping_rounds = early_stopping_rounds

    @property
    def hyperparams(self) -> Hyperparams:
        return Hyperparams(**self.get_params())

    @classmethod
    def from_hyperparams(cls, hp: Hyperparams) -> "BoostedTreeClassifier":
        return cls(**hp.to_dict())

    # -- training --------------------------------------------------------

    def fit(self, X, y, eval_set=None):
        hp = self.hyperparams
        names = getattr(X, "columns", None)
        X = check_finite_matrix(X)
        y = check_labels(y, X.shape[0])
        self.classes_ = check_min_class_count(y, 2)
        self.n_features_in_ = X.shape[1]
        self.feature_names_ = [str(c) for c in names] if names is not None else [f"f{i}" for i in range(X.shape[1])]
        if names is not None:
            self.feature_names_in_ = np.asarray(self.feature_names_, dtype=object)
        codes = np.searchsorted(self.classes_, y)
        K = self.classes_.size
        self.task_ = "binary" if K == 2 else "multiclass"
        n, d = X.shape
        rng = np.random.default_rng(hp.seed)
        n_rows = max(1, int(round(hp.subsample * n)))
        n_cols = max(1, int(round(hp.colsample_bytree * d)))

        if self.task_ == "binary":
            prior = float(np.mean(codes))
            self.base_score_ = np.array([math.log(prior / (1.0 - prior))])
            onehot = None
        else:
            self.base_score_ = np.zeros(K)
            onehot = np.eye(K)[codes]
        margin = np.tile(self.base_score_, (n, 1))

        Xv = cv = vmargin = None
        if eval_set is not None:
            Xv = check_finite_matrix(eval_set[0])
            cv = np.searchsorted(self.classes_, np.asarray(eval_set[1]))
            vmargin = np.tile(self.base_score_, (Xv.shape[0], 1))
        self.trees_ = []
        self.train_loss_ = [self._loss(codes, margin)]
        self.eval_loss_ = [] if eval_set is not None else None
        best, best_round, stale = math.inf, 0, 0

        for _ in range(hp.num_rounds):
            if self.task_ == "binary":
                p = expit(margin[:, 0])
                grads, hess = [p - codes], [p * (1.0 - p)]
            else:
                p = softmax(margin, axis=1)
                grads = [p[:, k] - onehot[:, k] for k in range(K)]
                hess = [p[:, k] * (1.0 - p[:, k]) for k in range(K)]
            round_trees = []
            for k in range(len(grads)):
                rows = np.sort(rng.choice(n, n_rows, replace=False)) if n_rows < n else np.arange(n)
                cols = np.sort(rng.choice(d, n_cols, replace=False)) if n_cols < d else np.arange(d)
                tree = grow_tree(X[rows], grads[k][rows], hess[k][rows], hp, cols)
                margin[:, k] += tree.predict(X)
                if vmargin is not None:
                    vmargin[:, k] += tree.predict(Xv)
                round_trees.append(tree)
            self.trees_.append(round_trees)
            self.train_loss_.append(self._loss(codes, margin))
            if vmargin is not None:
                vl = self._loss(cv, vmargin)
                self.eval_loss_.append(vl)
                if vl < best - 1e-12:
                    best, best_round, stale = vl, len(self.trees_), 0
                else:
                    stale += 1
                    if hp.early_stopping_rounds and stale >= hp.early_stopping_rounds:
                        self.trees_ = self.trees_[:best_round]
                        self.train_loss_ = self.train_loss_[: best_round + 1]
                        break
        self._set_importance()
        return self

    def _loss(self, codes, margin):
        if self.task_ == "binary":
            return _logloss(codes, margin[:, 0])
        return _softmax_loss(codes, margin)

    def _set_importance(self):
        total = np.zeros(self.n_features_in_)
        for round_trees in self.trees_:
            for tree in round_trees:
                inner = tree.feature >= 0
                np.add.at(total, tree.feature[inner], tree.gain[inner])
        s = total.sum()
        self.feature_importances_ = total / s if s > 0 else total

    # -- inference -------------------------------------------------------

    def decision_function(self, X) -> np.ndarray:
        check_is_fitted(self, "trees_")
        X = check_finite_matrix(X)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"expected {self.n_features_in_} features, got {X.shape[1]}")
        margin = np.tile(self.base_score_, (X.shape[0], 1))
        for round_trees in self.trees_:
            for k, tree in enumerate(round_trees):
                margin[:, k] += tree.predict(X)
        return margin[:, 0] if self.task_ == "binary" else margin

    def predict_proba(self, X) -> np.ndarray:
        margin = self.decision_function(X)
        if self.task_ == "binary":
            p1 = expit(margin)
            return np.column_stack([1.0 - p1, p1])
        return softmax(margin, axis=1)

    def predict(self, X) -> np.ndarray:
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]

    def positive_score(self, X) -> np.ndarray:
        """Probability of the last class (binary) used for thresholding."""
        return self.predict_proba(X)[:, -1]

    # -- persistence -----------------------------------------------------

    def to_dict(self) -> dict:
        check_is_fitted(self, "trees_")
        return {
            "format": MODEL_FORMAT,
            "version": MODEL_VERSION,
            "task": self.task_,
            "classes": [c.item() if hasattr(c, "item") else c for c in self.classes_],
            "base_score": self.base_score_.tolist(),
            "feature_names": list(self.feature_names_),
            "hyperparams": self.hyperparams.to_dict(),
            "train_loss": list(self.train_loss_),
            "trees": [[t.to_dict() for t in rt] for rt in self.trees_],
        }

    @classmethod
    def from_dict(cls, doc: Mapping) -> "BoostedTreeClassifier":
        if doc.get("format") != MODEL_FORMAT:
            raise ValueError("not a boosted-tree model document")
        if doc.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported model version {doc.get('version')!r}")
        model = cls.from_hyperparams(Hyperparams.from_dict(doc["hyperparams"]))
        model.task_ = doc["task"]
        model.classes_ = np.asarray(doc["classes"])
        model.base_score_ = np.asarray(doc["base_score"], dtype=float)
        model.feature_names_ = list(doc["feature_names"])
        model.n_features_in_ = len(model.feature_names_)
        model.train_loss_ = list(doc.get("train_loss", []))
        model.trees_ = [[Tree.from_dict(t) for t in rt] for rt in doc["trees"]]
        model._set_importance()
        return model

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh)

    @classmethod
    def load(cls, path) -> "BoostedTreeClassifier":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))


BoostedEnsemble = BoostedTreeClassifier


def train(X, y, hp: Hyperparams | None = None, task: str = "auto", feature_names=None) -> BoostedTreeClassifier:
    """Fit a model; ``task`` is checked against the number of classes."""
    hp = hp or Hyperparams()
    k = np.unique(np.asarray(y)).size
    if task == "binary" and k != 2:
        raise ValueError(f"binary task needs exactly 2 classes, got {k}")
    if task == "multiclass" and k < 2:
        raise ValueError("multiclass task needs at least 2 classes")
    model = BoostedTreeClassifier.from_hyperparams(hp)
    if feature_names is not None:
        import pandas as pd

        X = pd.DataFrame(np.asarray(X, dtype=float), columns=list(feature_names))
    return model.fit(X, y)


def zero_model(feature_names, classes, base_score=None) -> BoostedTreeClassifier:
    """A model with no trees, useful as a reference predictor."""
    model = BoostedTreeClassifier(num_rounds=0)
    model.classes_ = np.asarray(classes)
    model.task_ = "binary" if model.classes_.size == 2 else "multiclass"
    k = 1 if model.task_ == "binary" else model.classes_.size
    model.base_score_ = np.zeros(k) if base_score is None else np.asarray(base_score, dtype=float).reshape(k)
    model.feature_names_ = list(feature_names)
    model.n_features_in_ = len(model.feature_names_)
    model.trees_ = []
    model.train_loss_ = []
    model._set_importance()
    return model


def predict_proba(model: BoostedTreeClassifier, row) -> np.ndarray:
    """Probabilities for a single named row (mapping or FeatureVector)."""
    values = row if isinstance(row, Mapping) else row.values
    missing = [n for n in model.feature_names_ if n not in values]
    if missing:
        raise KeyError(f"row lacks model features: {missing[:5]}")
    x = np.array([[float(values[n]) for n in model.feature_names_]])
    return model.predict_proba(x)[0]


def feature_importance(model: BoostedTreeClassifier) -> list[tuple[str, float]]:
    """Features with positive gain share, descending, ties alphabetical."""
    check_is_fitted(model, "trees_")
    pairs = [(n, float(s)) for n, s in zip(model.feature_names_, model.feature_importances_) if s > 0]
    return sorted(pairs, key=lambda p: (-p[1], p[0]))


@dataclass
class CVResult:
    task: str
    folds: list[dict] = field(default_factory=list)

    @property
    def mean(self) -> dict:
        keys = self.folds[0].keys()
        return {k: float(np.mean([f[k] for f in self.folds])) for k in keys}

    def as_dict(self) -> dict:
        return {"task": self.task, "folds": self.folds, "mean": self.mean}


def cross_validate(X, y, hp: Hyperparams | None = None, folds: int = 5, seed: int = 0, threshold: float = 0.5,
                   groups=None) -> CVResult:
    """Stratified k-fold evaluation.

    Binary folds report precision, recall, F1 (at ``threshold``) and AUC;
    multiclass folds report accuracy and mlogloss. With ``groups`` (e.g. the
    flow key of each window) no group is split across train and test.
    """
    hp = hp or Hyperparams()
    if folds < 2:
        raise ValueError("folds must be >= 2")
    X = check_finite_matrix(X)
    y = check_labels(y, X.shape[0])
    classes = check_min_class_count(y, folds)
    task = "binary" if classes.size == 2 else "multiclass"
    if groups is None:
        splits = StratifiedKFold(n_splits=folds, shuffle=True, random_state=seed).split(X, y)
    else:
        groups = np.asarray(groups)
        if groups.shape[0] != X.shape[0]:
            raise ValueError("groups must have one entry per row")
        splits = StratifiedGroupKFold(n_splits=folds, shuffle=True, random_state=seed).split(X, y, groups)
    result = CVResult(task)
    for tr, te in splits:
        model = BoostedTreeClassifier.from_hyperparams(hp).fit(X[tr], y[tr])
        proba = model.predict_proba(X[te])
        if task == "binary":
            truth = y[te] == classes[1]
            prf = metrics.confusion_and_prf(proba[:, 1], truth, threshold)
            auc = metrics.roc_auc(proba[:, 1], truth).auc if 0 < truth.sum() < truth.size else float("nan")
            result.folds.append({"precision": prf.precision, "recall": prf.recall, "f1": prf.f1, "auc": auc})
        else:
            onehot = (y[te][:, None] == classes[None, :]).astype(float)
            acc = float(np.mean(classes[np.argmax(proba, axis=1)] == y[te]))
            result.folds.append({"accuracy": acc, "mlogloss": metrics.mlogloss(onehot, proba)})
    return result
