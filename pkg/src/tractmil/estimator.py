"""Scikit-learn style wrapper around the gated-attention bag classifier.

Bags are variable-length, so ``X`` is a list of TractBag objects or a list of
(K_i, M) instance arrays (with ``y`` given per bag). The estimator follows the
fit/predict/predict_proba/get_params conventions so it composes with sklearn
tooling (clone, grid search over bag-level folds, pipelines ending in it).
"""

from __future__ import annotations

import math

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin

from .bags import TractBag, InstanceEmbedding
from .errors import DataError, ShapeError
from .milcore import forward, sigmoid
from .trainer import TrainConfig, run_training

__all__ = ["GatedAttentionMIL", "as_bags"]


def as_bags(X, y=None) -> list[TractBag]:
    """Normalize estimator input to a list of TractBag.

    Accepts a list of TractBag (y optional, overriding labels when given) or a
    list of 2-D arrays, one per bag, each K_i x M (y required).
    """
    if len(X) == 0:
        raise ShapeError("X must contain at least one bag")
    if y is not None and len(y) != len(X):
        raise ShapeError(f"y has {len(y)} entries for {len(X)} bags")
    if all(isinstance(item, TractBag) for item in X):
        if y is None:
            return list(X)
        return [
            TractBag(
                tract_id=bag.tract_id,
                instances=bag.instances,
                label=int(label),
                income=bag.income,
                city=bag.city,
            )
            for bag, label in zip(X, y)
        ]
    bags = []
    for index, item in enumerate(X):
        arr = np.asarray(item, dtype=np.float64)
        if arr.ndim != 2:
            raise ShapeError(f"bag {index}: expected a K x M array, got shape {arr.shape}")
        instances = [
            InstanceEmbedding(
                image_id=f"bag{index:06d}-inst{j:04d}",
                lat=0.0,
                lon=0.0,
                city="",
                features=arr[j],
            )
            for j in range(arr.shape[0])
        ]
        label = None if y is None else int(y[index])
        bags.append(TractBag(tract_id=f"bag{index:06d}", instances=instances, label=label))
    return bags


class GatedAttentionMIL(BaseEstimator, ClassifierMixin):
    """Gated-attention multiple-instance classifier with an internal
    stratified validation holdout for early stopping and model selection."""

    def __init__(
        self,
        l_dim=128,
        learning_rate=1e-5,
        weight_decay=1e-4,
        dropout_rate=0.9,
        batch_size=64,
        label_smoothing=0.1,
        max_epochs=100,
        patience=10,
        seed=0,
        pos_weight="auto",
        val_fraction=0.2,
        threshold=0.5,
        use_income=False,
        freeze_attention=False,
    ):
        self.l_dim = l_dim
        self.learning_rate = learning_rate
        self.weight_decay = weight_decay
        self.dropout_rate = dropout_rate
        self.batch_size = batch_size
        self.label_smoothing = label_smoothing
        self.max_epochs = max_epochs
        self.patience = patience
        self.seed = seed
        self.pos_weight = pos_weight
        self.val_fraction = val_fraction
        self.threshold = threshold
        self.use_income = use_income
        self.freeze_attention = freeze_attention

    def _train_config(self) -> TrainConfig:
        return TrainConfig(
            learning_rate=self.learning_rate,
            weight_decay=self.weight_decay,
            dropout_rate=self.dropout_rate,
            batch_size=self.batch_size,
            label_smoothing=self.label_smoothing,
            max_epochs=self.max_epochs,
            patience=self.patience,
            seed=self.seed,
            pos_weight=self.pos_weight,
            l_dim=self.l_dim,
            use_income=self.use_income,
            freeze_attention=self.freeze_attention,
        )

    def _holdout(self, bags: list[TractBag]):
        """Per-class shuffled validation slice of val_fraction; rest trains."""
        by_class: dict[int, list[int]] = {0: [], 1: []}
        for index, bag in enumerate(bags):
            if bag.label is None:
                raise DataError(f"bag {bag.tract_id} has no label; fit requires labeled bags")
            by_class[bag.label].append(index)
        if not by_class[0] or not by_class[1]:
            raise DataError("fit requires at least one bag of each class")
        rng = np.random.default_rng(self.seed)
        train_idx: list[int] = []
        val_idx: list[int] = []
        for cls in (0, 1):
            indices = list(by_class[cls])
            rng.shuffle(indices)
            n_val = max(1, math.floor(self.val_fraction * len(indices)))
            if n_val >= len(indices):
                raise DataError(f"class {cls} has too few bags for a validation holdout")
            val_idx += indices[:n_val]
            train_idx += indices[n_val:]
        return sorted(train_idx), sorted(val_idx)

    def fit(self, X, y=None):
        bags = as_bags(X, y)
        train_idx, val_idx = self._holdout(bags)
        result = run_training(
            [bags[i] for i in train_idx],
            [bags[i] for i in val_idx],
            self._train_config(),
        )
        self.model_ = result.model
        self.history_ = result.history
        self.best_epoch_ = result.best_epoch
        self.classes_ = np.array([0, 1])
        self.n_features_in_ = result.model.m
        return self

    def _check_fitted(self):
        if not hasattr(self, "model_"):
            raise DataError("estimator is not fitted; call fit first")

    def decision_function(self, X) -> np.ndarray:
        self._check_fitted()
        bags = as_bags(X)
        return np.array([forward(bag, self.model_).logit for bag in bags])

    def predict_proba(self, X) -> np.ndarray:
        logits = self.decision_function(X)
        p1 = sigmoid(logits)
        return np.column_stack([1.0 - p1, p1])

    def predict(self, X) -> np.ndarray:
        proba = self.predict_proba(X)[:, 1]
        return (proba >= self.threshold).astype(int)

    def score(self, X, y=None, sample_weight=None) -> float:
        bags = as_bags(X, y)
        labels = np.array([bag.label for bag in bags])
        if any(label is None for label in labels):
            raise DataError("score requires labeled bags")
        return float(np.mean(self.predict(X) == labels))
