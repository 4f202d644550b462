"""Scikit-learn style wrappers so the pipeline composes with the wider
ecosystem: transformers for the preprocessing steps (NaN marks a missing
cell) and a transductive graph classifier (-1 marks an unlabeled subject,
as in sklearn's semi-supervised estimators).
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array

from .data import (FeatureMatrix, SplitSpec, drop_sparse_features,
                   impute_knn_mean, make_splits, normalize_unit_variance)
from .graph import KernelParams, build_graph
from .models import ModelConfig
from .rng import derive_seed
from .train import Split, TrainConfig, auc, predict_proba, train


def _to_feature_matrix(X, y=None) -> FeatureMatrix:
    X = check_array(X, ensure_all_finite="allow-nan", dtype=np.float64)
    mask = np.isnan(X)
    labels = (np.full(X.shape[0], -1, dtype=np.int64) if y is None
              else np.asarray(y, dtype=np.int64))
    return FeatureMatrix([f"x{i}" for i in range(X.shape[1])],
                         np.where(mask, 0.0, X), mask, labels)


class SparseFeatureDropper(TransformerMixin, BaseEstimator):
    """Drop columns whose NaN fraction strictly exceeds `threshold`."""

    def __init__(self, threshold=0.5):
        self.threshold = threshold

    def fit(self, X, y=None):
        X = check_array(X, ensure_all_finite="allow-nan", dtype=np.float64)
        frac = np.isnan(X).mean(axis=0)
        self.keep_mask_ = frac <= self.threshold
        return self

    def transform(self, X):
        if not hasattr(self, "keep_mask_"):
            raise NotFittedError("SparseFeatureDropper is not fitted")
        X = check_array(X, ensure_all_finite="allow-nan", dtype=np.float64)
        return X[:, self.keep_mask_]


class KNNMeanImputer(TransformerMixin, BaseEstimator):
    """Fill NaNs with the mean over the k nearest rows that observe the
    feature (overlap-rescaled Euclidean distances). Transductive: distances
    are computed within the transformed matrix itself."""

    def __init__(self, k=10):
        self.k = k

    def fit(self, X, y=None):
        check_array(X, ensure_all_finite="allow-nan", dtype=np.float64)
        self.n_features_in_ = np.asarray(X).shape[1]
        return self

    def transform(self, X):
        fm = _to_feature_matrix(X)
        return impute_knn_mean(fm, self.k).values


class UnitVarianceScaler(TransformerMixin, BaseEstimator):
    """Z-score columns with the sample standard deviation; constant columns
    become all zeros."""

    def fit(self, X, y=None):
        fm = _to_feature_matrix(X)
        _, stats = normalize_unit_variance(fm)
        self.mean_, self.std_, self.constant_ = (stats["mean"], stats["std"],
                                                 stats["constant"])
        return self

    def transform(self, X):
        if not hasattr(self, "mean_"):
            raise NotFittedError("UnitVarianceScaler is not fitted")
        X = check_array(X, dtype=np.float64)
        safe = np.where(self.constant_, 1.0, self.std_)
        return np.where(self.constant_, 0.0, (X - self.mean_) / safe)


class SimilarityGraphBuilder(TransformerMixin, BaseEstimator):
    """Build the thresholded similarity graph from a (normalized) feature
    matrix; transform returns the SimilarityGraph object."""

    def __init__(self, k_neighbors=20, mu=0.5, edge_threshold=1e-9,
                 rho_is_squared=False):
        self.k_neighbors = k_neighbors
        self.mu = mu
        self.edge_threshold = edge_threshold
        self.rho_is_squared = rho_is_squared

    def fit(self, X, y=None):
        return self

    def transform(self, X):
        X = check_array(X, dtype=np.float64)
        params = KernelParams(self.k_neighbors, self.mu, self.edge_threshold,
                              self.rho_is_squared)
        return build_graph(X, params)


class GraphSemiSupervisedClassifier(ClassifierMixin, BaseEstimator):
    """Transductive semi-supervised classifier over a subject-similarity
    graph.

    fit(X, y) takes the full cohort with y in {0, 1, -1} (-1 = unlabeled);
    a graph may be passed to fit, otherwise one is built from X. Like
    sklearn's LabelPropagation the prediction is transductive: after fit,
    `transduction_proba_` holds the class-1 probability for every subject and
    predict_proba()/predict() with no arguments return cohort predictions.
    """

    def __init__(self, kind="difformer-attn", depth=2, hidden=64, heads=4,
                 residual_alpha=0.8, dropout=0.5, epochs=200,
                 learning_rate=0.001, weight_decay=0.01, selection="best_val",
                 patience=None, val_fraction=0.1, k_neighbors=20, mu=0.5,
                 edge_threshold=1e-9, random_state=0):
        self.kind = kind
        self.depth = depth
        self.hidden = hidden
        self.heads = heads
        self.residual_alpha = residual_alpha
        self.dropout = dropout
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.selection = selection
        self.patience = patience
        self.val_fraction = val_fraction
        self.k_neighbors = k_neighbors
        self.mu = mu
        self.edge_threshold = edge_threshold
        self.random_state = random_state

    def fit(self, X, y, graph=None):
        fm = _to_feature_matrix(X, y)
        if fm.missing_mask.any():
            raise ValueError("impute missing values before fitting")
        model_cfg = ModelConfig(kind=self.kind, depth=self.depth,
                                hidden=self.hidden, heads=self.heads,
                                residual_alpha=self.residual_alpha,
                                dropout=self.dropout)
        if graph is None and model_cfg.uses_graph:
            graph = build_graph(fm.values, KernelParams(
                self.k_neighbors, self.mu, self.edge_threshold))
        self.graph_ = graph

        labeled = np.flatnonzero(fm.labels != -1)
        if labeled.size == 0:
            raise ValueError("need at least one labeled subject")
        selection = self.selection
        rng = np.random.default_rng(derive_seed(self.random_state, "val"))
        # stratified holdout: AUC-based selection needs both classes in val,
        # and training needs at least one labeled subject per class left over
        val_parts = []
        if selection == "best_val":
            for c in (0, 1):
                members = labeled[fm.labels[labeled] == c]
                if members.size < 2:
                    val_parts = []
                    break
                n_c = min(members.size - 1,
                          max(1, int(round(self.val_fraction * members.size))))
                val_parts.append(rng.choice(members, size=n_c, replace=False))
        if val_parts:
            val_idx = np.sort(np.concatenate(val_parts))
            train_idx = np.setdiff1d(labeled, val_idx)
        else:
            train_idx, val_idx = labeled, labeled
            selection = "final"
        split = Split(train_idx, val_idx, np.empty(0, dtype=np.intp))

        train_cfg = TrainConfig(epochs=self.epochs,
                                learning_rate=self.learning_rate,
                                weight_decay=self.weight_decay,
                                seed=derive_seed(self.random_state, "fit"),
                                selection=selection, patience=self.patience)
        self.model_, self.fit_info_ = train(model_cfg, train_cfg, fm,
                                            graph, split)
        self.classes_ = np.array([0, 1])
        g = graph if model_cfg.uses_graph else None
        self.transduction_proba_ = predict_proba(self.model_, fm.values, g)
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise NotFittedError("GraphSemiSupervisedClassifier is not fitted")

    def predict_proba(self, X=None):
        self._check_fitted()
        if X is not None:
            X = check_array(X, dtype=np.float64)
            g = self.graph_ if self.model_.config.uses_graph else None
            if g is not None and X.shape[0] != g.n:
                raise ValueError("transductive model: X must be the fit cohort")
            p1 = predict_proba(self.model_, X, g)
        else:
            p1 = self.transduction_proba_
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X=None):
        return (self.predict_proba(X)[:, 1] >= 0.5).astype(int)

    def score(self, X=None, y=None):
        """Test AUC over the subjects whose labels are given in y."""
        self._check_fitted()
        proba = self.predict_proba(X)[:, 1]
        y = np.asarray(y)
        known = y != -1
        return auc(proba[known], y[known])
