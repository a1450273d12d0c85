"""scikit-learn style wrapper around the segmentation networks."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted

from .data import IGNORE_ID
from .network import ModelConfig, build_model, predict_any_size
from .train import DESK_SCHEDULE, AugmentConfig, SGDConfig, train_loop


def check_images(X, in_channels: int | None = None) -> np.ndarray:
    """Validate an image batch and return it as a float32 (n, c, h, w) array."""
    X = np.asarray(X)
    if X.ndim == 3:
        X = X[None]
    if X.ndim != 4:
        raise ValueError(f"images must have dims (n, c, h, w), got {X.shape}")
    if X.shape[0] == 0:
        raise ValueError("no images given")
    if not np.issubdtype(X.dtype, np.number):
        raise ValueError(f"images must be numeric, got dtype {X.dtype}")
    X = X.astype(np.float32, copy=False)
    if not np.isfinite(X).all():
        raise ValueError("images contain NaN or infinite values")
    if in_channels is not None and X.shape[1] != in_channels:
        raise ValueError(f"expected {in_channels} channels, got {X.shape[1]}")
    return X


def check_labels(y, X: np.ndarray, ignore_id: int = IGNORE_ID) -> np.ndarray:
    """Validate integer label maps (n, h, w) matching ``X``."""
    y = np.asarray(y)
    if y.ndim == 2:
        y = y[None]
    if y.shape != (X.shape[0],) + X.shape[2:]:
        raise ValueError(f"labels {y.shape} do not match images {X.shape}")
    if not np.issubdtype(y.dtype, np.integer):
        if not np.array_equal(y, np.round(y)):
            raise ValueError("labels must be integers")
    y = y.astype(np.int64)
    if not (y != ignore_id).any():
        raise ValueError("every label is the ignore id")
    return y


class RotEqNetSegmenter(ClassifierMixin, BaseEstimator):
    """Dense per-pixel classifier.

    ``fit`` takes images (n, c, h, w) with h and w divisible by 64 and label
    maps (n, h, w).  ``predict`` accepts any spatial size (inputs are
    reflect-padded internally) and returns label maps in terms of
    ``classes_``.  Pixels labelled ``ignore_id`` are skipped in training and
    scoring.
    """

    def __init__(
        self,
        nf=2,
        n_orientations=8,
        variant="roteqnet",
        filter_size=7,
        head_features="magnitude",
        schedule=None,
        batch_size=4,
        momentum=0.9,
        augment=True,
        ignore_id=IGNORE_ID,
        random_state=0,
    ):
        self.nf = nf
        self.n_orientations = n_orientations
        self.variant = variant
        self.filter_size = filter_size
        self.head_features = head_features
        self.schedule = schedule
        self.batch_size = batch_size
        self.momentum = momentum
        self.augment = augment
        self.ignore_id = ignore_id
        self.random_state = random_state

    def _encode(self, y: np.ndarray) -> np.ndarray:
        valid = y != self.ignore_id
        out = np.full(y.shape, IGNORE_ID, dtype=np.int64)
        idx = np.searchsorted(self.classes_, y[valid])
        if np.any(idx >= len(self.classes_)) or np.any(self.classes_[np.minimum(idx, len(self.classes_) - 1)] != y[valid]):
            raise ValueError("labels contain classes not seen during fit")
        out[valid] = idx
        return out

    def fit(self, X, y, X_val=None, y_val=None):
        X = check_images(X)
        y = check_labels(y, X, self.ignore_id)
        self.classes_ = np.unique(y[y != self.ignore_id])
        if len(self.classes_) < 2:
            raise ValueError("need at least two classes to fit")
        self.n_features_in_ = X.shape[1]
        config = ModelConfig(
            nf=self.nf,
            n_orientations=self.n_orientations,
            n_classes=len(self.classes_),
            in_channels=X.shape[1],
            filter_size=self.filter_size,
            variant=self.variant,
            head_features=self.head_features,
        )
        model = build_model(config, seed=self.random_state)
        model.check_input(X)
        sgd = SGDConfig(self.momentum, self.schedule if self.schedule is not None else DESK_SCHEDULE, self.batch_size)
        aug = AugmentConfig() if self.augment else None
        val = None
        if X_val is not None:
            Xv = check_images(X_val, X.shape[1])
            val = (Xv, self._encode(check_labels(y_val, Xv, self.ignore_id)))
        result = train_loop(model, (X, self._encode(y)), val, sgd, aug, seed=self.random_state)
        self.model_ = result.best_model
        self.history_ = result.history
        return self

    def predict_proba(self, X) -> np.ndarray:
        """Class probabilities (n, n_classes, h, w)."""
        check_is_fitted(self, "model_")
        X = check_images(X, self.n_features_in_)
        return predict_any_size(self.model_, X)

    def predict(self, X) -> np.ndarray:
        check_is_fitted(self, "model_")
        return self.classes_[self.predict_proba(X).argmax(axis=1)]

    def score(self, X, y, sample_weight=None) -> float:
        """Pixel accuracy over labels other than ``ignore_id``."""
        X = check_images(X, self.n_features_in_)
        y = check_labels(y, X, self.ignore_id)
        valid = y != self.ignore_id
        pred = self.predict(X)
        if sample_weight is not None:
            w = np.broadcast_to(np.asarray(sample_weight, dtype=np.float64)[:, None, None], y.shape)
            return float((w * (pred == y))[valid].sum() / w[valid].sum())
        return float((pred == y)[valid].mean())
