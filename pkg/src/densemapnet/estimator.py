"""scikit-learn compatible wrapper around the DenseMapNet graph."""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_is_fitted

from .data import StereoSample
from .graph import build_densemapnet
from .metrics import epe
from .ops import INFERENCE, OpContext
from .training import TrainConfig, fit


def check_stereo_array(X, channels=None):
    """Validate stacked stereo input ``[N,H,W,2C]`` (left channels first).

    Returns ``(left, right)`` as float32 arrays.
    """
    X = np.asarray(X)
    if X.ndim != 4:
        raise ValueError(f"X must be [N,H,W,2C] stacked stereo pairs, got shape {X.shape}")
    if X.shape[3] % 2 or (channels is not None and X.shape[3] != 2 * channels):
        raise ValueError(f"X last axis must be 2*channels, got {X.shape[3]}")
    if X.shape[1] < 8 or X.shape[2] < 8:
        raise ValueError(f"images must be at least 8x8, got {X.shape[1:3]}")
    if not np.all(np.isfinite(X)):
        raise ValueError("X contains NaN or inf")
    X = X.astype(np.float32, copy=False)
    c = X.shape[3] // 2
    return X[..., :c], X[..., c:]


def check_disparity_array(y, shape):
    """Disparity targets ``[N,H,W]`` or ``[N,H,W,1]``; non-finite or negative entries are invalid."""
    y = np.asarray(y, dtype=np.float32)
    if y.ndim == 3:
        y = y[..., None]
    if y.shape != tuple(shape[:3]) + (1,):
        raise ValueError(f"y shape {y.shape} does not match X spatial shape {tuple(shape[:3])}")
    mask = np.isfinite(y) & (y >= 0)
    return np.where(mask, y, 0).astype(np.float32), mask.astype(np.float32)


class DenseMapNetRegressor(RegressorMixin, BaseEstimator):
    """Dense disparity regression from rectified stereo pairs.

    ``X`` is ``[N,H,W,2C]`` with the left image in the first ``C`` channels,
    pixel values in [0, 1]. ``y`` is disparity in pixels. ``score`` returns
    the negative end-point error so that larger is better.
    """

    def __init__(self, channels=3, dmax=192.0, learning_rate=1e-3, decay=1e-6,
                 batch_size=4, epochs=1, random_state=0):
        self.channels = channels
        self.dmax = dmax
        self.learning_rate = learning_rate
        self.decay = decay
        self.batch_size = batch_size
        self.epochs = epochs
        self.random_state = random_state

    def _samples(self, X, y):
        left, right = check_stereo_array(X, self.channels)
        disparity, mask = check_disparity_array(y, X.shape)
        mask *= disparity <= self.dmax
        return [StereoSample(left[i:i + 1], right[i:i + 1], np.minimum(disparity[i:i + 1], self.dmax),
                             mask[i:i + 1], float(self.dmax)) for i in range(len(left))]

    def fit(self, X, y):
        X = np.asarray(X)
        samples = self._samples(X, y)
        cfg = TrainConfig(learning_rate=self.learning_rate, decay=self.decay, batch_size=self.batch_size,
                          epochs=self.epochs, seed=self.random_state, dmax=self.dmax)
        self.graph_ = build_densemapnet(self.channels, self.dmax, seed=self.random_state)
        self.history_, self.optimizer_state_ = fit(self.graph_, samples, cfg)
        self.n_features_in_ = X.shape[3]
        return self

    def predict(self, X):
        check_is_fitted(self, "graph_")
        left, right = check_stereo_array(X, self.channels)
        out = self.graph_.forward(left, right, OpContext(INFERENCE), retain=False)
        return out[..., 0].astype(np.float64) * self.dmax

    def score(self, X, y, sample_weight=None):
        disparity, mask = check_disparity_array(y, np.shape(X))
        return -epe(self.predict(X), disparity[..., 0], mask[..., 0])
