"""scikit-learn style wrapper around training and scoring.

``DecoderEncoderDetector`` follows the outlier-detector conventions:
``score_samples`` is higher for normal data, ``predict`` returns +1 for
in-class and -1 for novel samples. ``anomaly_score`` gives the raw
reconstruction error, which is novelty-positive.
"""

from __future__ import annotations

from dataclasses import replace

import numpy as np
import torch
from sklearn.base import BaseEstimator, OutlierMixin
from sklearn.utils.validation import check_is_fitted

from .exceptions import DataError, ShapeError
from .scoring import SCORE_METRICS, reconstruction_scores
from .trainer import (
    TrainConfig,
    apply_ablation,
    encode_images,
    fit_state,
    init_state,
    load_checkpoint,
    save_checkpoint,
)


def check_images(X, image_shape=None):
    """Validate images and return a float32 (N, C, H, W) array.

    Accepts an array of shape (N, C, H, W) or (N, H, W), or a sequence of
    ``ImageSample``. Values must be finite and lie in [-1, 1].
    """
    if isinstance(X, (list, tuple)) and X and hasattr(X[0], "pixels"):
        X = np.stack([np.asarray(s.pixels) for s in X])
    X = np.asarray(X, dtype=np.float32)
    if X.ndim == 3:
        X = X[:, None]
    if X.ndim != 4:
        raise ShapeError(f"expected images of shape (N, C, H, W), got {X.shape}")
    if len(X) == 0:
        raise DataError("no images given")
    if image_shape is not None and tuple(X.shape[1:]) != tuple(image_shape):
        raise ShapeError(f"images are {tuple(X.shape[1:])}, expected {tuple(image_shape)}")
    if not np.isfinite(X).all():
        raise DataError("images contain NaN or infinite values")
    if X.min() < -1 or X.max() > 1:
        raise DataError("pixel values must lie in [-1, 1]")
    return X


class DecoderEncoderDetector(OutlierMixin, BaseEstimator):
    """One-class novelty detector trained on in-class images only.

    Parameters
    ----------
    config : TrainConfig or dict, optional
        Full training configuration. ``None`` uses the defaults.
    ablation : str or tuple of str, optional
        Named presets applied on top of ``config``.
    score_metric : {"laplacian", "mse"}
        Reconstruction error used for scoring.
    threshold_percentile : float
        Percentile of training scores used as the decision threshold.
    """

    def __init__(self, config=None, ablation=None, score_metric="laplacian", threshold_percentile=95.0):
        self.config = config
        self.ablation = ablation
        self.score_metric = score_metric
        self.threshold_percentile = threshold_percentile

    def _resolved_config(self, image_shape):
        cfg = self.config
        if cfg is None:
            cfg = TrainConfig()
        elif isinstance(cfg, dict):
            cfg = TrainConfig.from_dict(cfg)
        if self.ablation:
            names = (self.ablation,) if isinstance(self.ablation, str) else tuple(self.ablation)
            cfg = apply_ablation(cfg, *names)
        c, h, _ = image_shape
        if (cfg.arch.channels, cfg.arch.image_size) != (c, h):
            cfg = replace(cfg, arch=replace(cfg.arch, channels=c, image_size=h))
        return cfg

    def fit(self, X, y=None):
        """Train on in-class images ``X``; ``y`` is ignored."""
        if self.score_metric not in SCORE_METRICS:
            raise ValueError(f"score_metric must be one of {SCORE_METRICS}")
        if not 0 <= self.threshold_percentile <= 100:
            raise ValueError("threshold_percentile must lie in [0, 100]")
        X = check_images(X)
        if X.shape[2] != X.shape[3]:
            raise ShapeError("images must be square")
        cfg = self._resolved_config(X.shape[1:])
        self.state_ = fit_state(init_state(X, cfg), X)
        self._finish_fit(X)
        return self

    def _finish_fit(self, X):
        self.n_features_in_ = int(np.prod(X.shape[1:]))
        self.image_shape_ = tuple(X.shape[1:])
        self.history_ = list(self.state_.history)
        self.threshold_ = float(np.percentile(self.anomaly_score(X), self.threshold_percentile))
        self.offset_ = -self.threshold_

    @classmethod
    def from_checkpoint(cls, path, train_images, **params):
        """Rebuild a fitted detector from a checkpoint and its training images."""
        est = cls(**params)
        est.state_ = load_checkpoint(path)
        est.config = est.state_.config
        est._finish_fit(check_images(train_images, est.state_.config.arch.image_shape))
        return est

    def save(self, path):
        check_is_fitted(self, "state_")
        save_checkpoint(self.state_, path)

    def anomaly_score(self, X):
        """Reconstruction error per image; larger means more novel."""
        check_is_fitted(self, "state_")
        X = check_images(X, self.state_.config.arch.image_shape)
        return reconstruction_scores(self.state_.model, X, self.score_metric, self.state_.config.pyramid_levels)

    def score_samples(self, X):
        return -self.anomaly_score(X)

    def decision_function(self, X):
        """Positive for in-class, negative for novel samples."""
        return self.score_samples(X) - self.offset_

    def predict(self, X):
        return np.where(self.decision_function(X) < 0, -1, 1)

    def transform(self, X):
        """Global latent vectors z, shape (N, latent_dim)."""
        check_is_fitted(self, "state_")
        X = check_images(X, self.state_.config.arch.image_shape)
        return encode_images(self.state_.model, torch.from_numpy(X)).detach().numpy().astype(np.float64)
