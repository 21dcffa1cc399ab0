"""Per-sample latent codes initialized from a whitened PCA of the training set."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .exceptions import ConfigError, ShapeError


@dataclass(frozen=True)
class PcaModel:
    mean: np.ndarray  # (P,)
    components: np.ndarray  # (d, P), orthonormal rows
    component_scales: np.ndarray  # (d,), > 0

    @property
    def n_components(self):
        return self.components.shape[0]

    def to_dict(self):
        return {"mean": self.mean, "components": self.components, "component_scales": self.component_scales}


@dataclass
class LatentCode:
    value: np.ndarray
    sample_id: str
    trainable: bool = True


def _flatten(train):
    if isinstance(train, np.ndarray):
        X = train.reshape(len(train), -1)
    else:
        X = np.stack([np.asarray(s.pixels).ravel() for s in train])
    return X.astype(np.float64)


def _fix_signs(components):
    idx = np.argmax(np.abs(components), axis=1)
    signs = np.sign(components[np.arange(len(components)), idx])
    signs[signs == 0] = 1.0
    return components * signs[:, None]


def pca_fit(train, d: int) -> PcaModel:
    """Fit a d-component PCA to flattened images (samples or an (N, ...) array).

    Components are the top right-singular vectors of the centred data, each
    flipped so its largest-magnitude entry is positive. Scales are the
    standard deviations (ddof=1) of the training projections.
    """
    X = _flatten(train)
    n, p = X.shape
    if d < 1 or d >= min(n, p):
        raise ConfigError(f"latent dim {d} must be in [1, min(N, P)) = [1, {min(n, p)})")
    mean = X.mean(axis=0)
    Xc = X - mean
    _, s, vt = np.linalg.svd(Xc, full_matrices=False)
    components = _fix_signs(vt[:d])
    scales = s[:d] / np.sqrt(n - 1)
    tol = max(n, p) * np.finfo(np.float64).eps * (s[0] if s.size and s[0] > 0 else 1.0)
    deficient = s[:d] <= tol
    if deficient.any():
        warnings.warn(
            f"training data has rank {int((~deficient).sum())} < {d}; padding scales with 1.0",
            RuntimeWarning,
            stacklevel=2,
        )
        scales = np.where(deficient, 1.0, scales)
    return PcaModel(mean=mean, components=components, component_scales=scales)


def pca_project(model: PcaModel, x) -> np.ndarray:
    """Whitened projection of one sample (or an (N, ...) batch)."""
    arr = np.asarray(getattr(x, "pixels", x), dtype=np.float64)
    p = model.mean.shape[0]
    single = arr.size == p
    flat = arr.reshape(1 if single else len(arr), -1)
    if flat.shape[1] != p:
        raise ShapeError(f"sample has {flat.shape[1]} values, PCA was fit on {p}")
    z = (flat - model.mean) @ model.components.T / model.component_scales
    return z[0] if single else z


def pca_unproject(model: PcaModel, z) -> np.ndarray:
    """Map whitened codes back to flattened pixel space."""
    z = np.asarray(z, dtype=np.float64)
    return (z * model.component_scales) @ model.components + model.mean


def init_codes(model: PcaModel, train) -> list:
    Z = pca_project(model, _flatten(train))
    Z = Z.reshape(len(Z), -1)
    ids = [s.id for s in train] if not isinstance(train, np.ndarray) else [str(i) for i in range(len(train))]
    return [LatentCode(value=z, sample_id=i) for z, i in zip(Z, ids)]


class PCAWhitener(TransformerMixin, BaseEstimator):
    """Estimator wrapper: ``fit`` runs :func:`pca_fit`, ``transform`` projects."""

    def __init__(self, n_components=128):
        self.n_components = n_components

    def fit(self, X, y=None):
        X = check_array(X, allow_nd=True, dtype=np.float64)
        self.model_ = pca_fit(X, self.n_components)
        self.n_features_in_ = self.model_.mean.shape[0]
        return self

    def transform(self, X):
        check_is_fitted(self, "model_")
        X = check_array(X, allow_nd=True, dtype=np.float64)
        return pca_project(self.model_, X.reshape(len(X), -1)).reshape(len(X), -1)

    def inverse_transform(self, Z):
        check_is_fitted(self, "model_")
        return pca_unproject(self.model_, check_array(Z))
