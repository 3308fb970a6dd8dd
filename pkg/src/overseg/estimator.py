"""Scikit-learn estimator facade over the segmentation model.

OverlapSegmenter wraps dataset stacking, U-Net initialization, training,
and thresholded prediction behind the standard fit/predict surface so
the model composes with sklearn tooling (get_params/set_params, clone,
pipelines operating on flattened pixel arrays).
"""

import numpy as np
from sklearn.base import BaseEstimator
from sklearn.utils.validation import check_is_fitted

from .nn import UNetConfig, init_params
from .train import TrainConfig, train_on_arrays, evaluate_arrays


class OverlapSegmenter(BaseEstimator):
    """Multi-label pixel segmenter for overlapping-letter images.

    Parameters mirror the underlying model and training configs; X is
    [n_samples, height, width] or flattened [n_samples, height*width],
    y is the matching stack of per-class binary masks ([n_samples,
    n_classes, height, width] or flattened).
    """

    def __init__(self, n_classes=5, base_filters=16, depth=2, height=28,
                 width=28, epochs=15, batch_size=64, learning_rate=1e-3,
                 init_seed=0, shuffle_seed=0, threshold=0.5,
                 validation_fraction=0.05):
        self.n_classes = n_classes
        self.base_filters = base_filters
        self.depth = depth
        self.height = height
        self.width = width
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.init_seed = init_seed
        self.shuffle_seed = shuffle_seed
        self.threshold = threshold
        self.validation_fraction = validation_fraction

    def _shape_x(self, X):
        X = np.asarray(X, dtype=np.float32)
        if X.ndim == 2 and X.shape[1] == self.height * self.width:
            X = X.reshape(-1, self.height, self.width)
        if X.ndim != 3 or X.shape[1:] != (self.height, self.width):
            raise ValueError(
                f"X must be [n, {self.height}, {self.width}] or flattened, "
                f"got {np.asarray(X).shape}")
        if X.shape[0] == 0:
            raise ValueError("X must contain at least one sample")
        return X

    def _shape_y(self, y, n):
        y = np.asarray(y)
        flat = self.n_classes * self.height * self.width
        if y.ndim == 2 and y.shape[1] == flat:
            y = y.reshape(-1, self.n_classes, self.height, self.width)
        if y.shape != (n, self.n_classes, self.height, self.width):
            raise ValueError(
                f"y must be [n, {self.n_classes}, {self.height}, "
                f"{self.width}] or flattened, got {y.shape}")
        if y.min() < 0 or y.max() > 1:
            raise ValueError("y must be binary masks")
        return y.astype(np.uint8)

    def fit(self, X, y):
        X = self._shape_x(X)
        y = self._shape_y(y, X.shape[0])
        config = UNetConfig(
            n_classes=self.n_classes, base_filters=self.base_filters,
            depth=self.depth, height=self.height, width=self.width)
        tconf = TrainConfig(
            epochs=self.epochs, batch_size=self.batch_size,
            learning_rate=self.learning_rate, shuffle_seed=self.shuffle_seed,
            metric_threshold=self.threshold)
        if X.shape[0] > 1:
            n_val = max(1, int(round(X.shape[0] * self.validation_fraction)))
            n_val = min(n_val, X.shape[0] - 1)
            train_x, val_x = X[:-n_val], X[-n_val:]
            train_y, val_y = y[:-n_val], y[-n_val:]
        else:
            # single sample: reuse it for validation rather than failing
            train_x = val_x = X
            train_y = val_y = y
        params, history = train_on_arrays(
            train_x, train_y, val_x, val_y, config, tconf,
            lambda: init_params(config, self.init_seed))
        self.config_ = config
        self.params_ = params
        self.history_ = history
        self.classes_ = np.arange(self.n_classes)
        return self

    def predict_proba(self, X):
        """Per-class probability masks, [n, n_classes, height, width]."""
        check_is_fitted(self, "params_")
        X = self._shape_x(X)
        from .nn import unet_forward_batch
        out = np.empty((X.shape[0], self.n_classes, self.height, self.width),
                       dtype=np.float32)
        for start in range(0, X.shape[0], self.batch_size):
            batch = X[start:start + self.batch_size]
            probs, _ = unet_forward_batch(self.params_, self.config_, batch)
            out[start:start + batch.shape[0]] = probs.transpose(1, 0, 2, 3)
        return out

    def predict(self, X):
        """Binary masks at the configured threshold."""
        return (self.predict_proba(X) >= self.threshold).astype(np.uint8)

    def score(self, X, y):
        """Micro-averaged binary pixel accuracy."""
        check_is_fitted(self, "params_")
        X = self._shape_x(X)
        y = self._shape_y(y, X.shape[0])
        report = evaluate_arrays(self.params_, self.config_, X, y,
                                 self.threshold, self.batch_size)
        return report.binary_accuracy
