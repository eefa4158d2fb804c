"""scikit-learn style estimator facade over the private training pipeline."""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.multiclass import unique_labels

from .chebyshev import ApproximatorKind
from .data_io import NormalizedDataset, RawDataset, normalize
from .errors import ShapeMismatch
from .network import LayerSpec, NetworkSpec, TrainedModel, evaluate, train


class PrivateCdbnClassifier(BaseEstimator, ClassifierMixin):
    """Differentially private convolutional deep belief network classifier.

    Wraps the functional-mechanism pipeline in the familiar fit/predict
    interface.  ``X`` is either ``(n, side, side)`` images or ``(n, side*side)``
    flattened rows with non-negative entries; they are scaled into [0, 1]
    before training.  ``epsilon`` is the total privacy budget; ``math.inf``
    trains without noise.
    """

    def __init__(
        self,
        epsilon: float = 1.0,
        n_groups: int = 8,
        filter_side: int = 5,
        pool_ratio: int = 2,
        degree: int = 7,
        kind: str = "chebyshev",
        feature_head: str = "energy_grid",
        feature_grid: int = 6,
        layer_share: float = 0.1,
        epochs: int = 2,
        lr: float = 1e-3,
        softmax_epochs: int = 4,
        softmax_lr: float = 0.02,
        seed: int = 0,
    ):
        self.epsilon = epsilon
        self.n_groups = n_groups
        self.filter_side = filter_side
        self.pool_ratio = pool_ratio
        self.degree = degree
        self.kind = kind
        self.feature_head = feature_head
        self.feature_grid = feature_grid
        self.layer_share = layer_share
        self.epochs = epochs
        self.lr = lr
        self.softmax_epochs = softmax_epochs
        self.softmax_lr = softmax_lr
        self.seed = seed

    def _as_images(self, X: np.ndarray) -> list[np.ndarray]:
        X = np.asarray(X, dtype=float)
        if X.ndim == 2:
            side = int(round(math.sqrt(X.shape[1])))
            if side * side != X.shape[1]:
                raise ShapeMismatch("flattened rows must have a square length")
            X = X.reshape(X.shape[0], side, side)
        if X.ndim != 3 or X.shape[1] != X.shape[2]:
            raise ShapeMismatch("X must be (n, side, side) or (n, side*side)")
        return [X[i] for i in range(X.shape[0])]

    def _spec(self, side: int, n_classes: int) -> NetworkSpec:
        if math.isinf(self.epsilon):
            total, split = math.inf, None
        else:
            total = self.epsilon
            split = (self.layer_share * total, (1.0 - self.layer_share) * total)
        return NetworkSpec(
            visible_side=side,
            layers=(
                LayerSpec(
                    self.n_groups,
                    self.filter_side,
                    self.pool_ratio,
                    ApproximatorKind(self.kind),
                    self.degree,
                ),
            ),
            epsilon_total=total,
            epsilon_split=split,
            feature_head=self.feature_head,
            feature_grid=self.feature_grid,
            n_classes=n_classes,
            epochs=self.epochs,
            lr=self.lr,
            softmax_epochs=self.softmax_epochs,
            softmax_lr=self.softmax_lr,
            seed=self.seed,
        )

    def fit(self, X, y):
        images = self._as_images(X)
        y = np.asarray(y)
        self.classes_ = unique_labels(y)
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes")
        codes = np.searchsorted(self.classes_, y)
        dataset = normalize(RawDataset(images, codes), mode="pixel")
        spec = self._spec(images[0].shape[0], len(self.classes_))
        self.model_ = train(spec, dataset)
        self.n_features_in_ = images[0].size
        return self

    def _check_fitted(self) -> TrainedModel:
        if not hasattr(self, "model_"):
            raise NotFittedError("call fit before predicting")
        return self.model_

    def predict(self, X):
        model = self._check_fitted()
        images = normalize(RawDataset(self._as_images(X)), mode="pixel").instances
        codes = np.array([model.predict(v) for v in images])
        return self.classes_[codes]

    def predict_proba(self, X):
        model = self._check_fitted()
        images = normalize(RawDataset(self._as_images(X)), mode="pixel").instances
        scores = np.stack([np.atleast_1d(model.predict_proba(v)) for v in images])
        if scores.shape[1] == 1:  # binomial head: P(class 1)
            scores = np.hstack([1.0 - scores, scores])
        return scores / scores.sum(axis=1, keepdims=True)

    def privacy_ledger(self) -> list[dict]:
        return self._check_fitted().accountant.as_dicts()

    def score_dataset(self, X, y) -> dict:
        model = self._check_fitted()
        images = self._as_images(X)
        codes = np.searchsorted(self.classes_, np.asarray(y))
        dataset = normalize(RawDataset(images, codes), mode="pixel")
        return evaluate(model, dataset)
