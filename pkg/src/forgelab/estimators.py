"""scikit-learn style wrappers.

The library functions use one example per *column*; these estimators take the
usual ``(n_samples, n_features)`` layout and transpose at the boundary.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.utils.multiclass import unique_labels
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import Dataset, Domain, MiniBatch, one_hot
from .exact import error_matrix_forge, perturb_forge, perturbation_basis
from .nn import FcnArchitecture, FcnParams, predict_proba
from .trace import TrainConfig, train


def check_batch(X, Y, n_classes=None):
    """Validate a rows-as-examples batch and return it as a :class:`MiniBatch`.

    ``Y`` may be integer labels (needs ``n_classes``) or an ``(n_samples, n)``
    label matrix.
    """
    X = check_array(X, dtype=np.float64)
    Y = np.asarray(Y)
    if Y.ndim == 1:
        if n_classes is None:
            raise ValueError("integer labels need n_classes")
        Y = one_hot(Y.astype(np.int64), n_classes).T
    Y = check_array(Y, dtype=np.float64)
    if X.shape[0] != Y.shape[0]:
        raise ValueError(f"X has {X.shape[0]} samples, Y has {Y.shape[0]}")
    return MiniBatch(X.T, Y.T)


def _resolve_params(model):
    if isinstance(model, FcnParams):
        return model
    if hasattr(model, "params_"):
        return model.params_
    raise TypeError("model must be FcnParams or a fitted FcnClassifier")


class FcnClassifier(ClassifierMixin, BaseEstimator):
    """Softmax network trained by plain SGD; keeps the full execution trace."""

    def __init__(self, hidden_layer_sizes=(16,), activation="relu", lr=0.01, steps=200,
                 batch_size=32, random_state=0):
        self.hidden_layer_sizes = hidden_layer_sizes
        self.activation = activation
        self.lr = lr
        self.steps = steps
        self.batch_size = batch_size
        self.random_state = random_state

    def fit(self, X, y):
        X, y = check_X_y(X, y)
        self.classes_ = unique_labels(y)
        codes = np.searchsorted(self.classes_, y)
        self.n_features_in_ = X.shape[1]
        dims = (X.shape[1], *self.hidden_layer_sizes, len(self.classes_))
        cfg = TrainConfig(self.lr, self.steps, min(self.batch_size, X.shape[0]),
                          self.random_state, FcnArchitecture(dims, self.activation))
        ds = Dataset(X.T, one_hot(codes, len(self.classes_)), Domain.box())
        self.trace_ = train(ds, cfg)
        self.params_ = self.trace_.checkpoints[-1]
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "params_")
        X = check_array(X, dtype=np.float64)
        return predict_proba(self.params_, X.T).T

    def predict(self, X):
        proba = self.predict_proba(X)
        return self.classes_[np.argmax(proba, axis=1)]


class PerturbationForger(TransformerMixin, BaseEstimator):
    """Adds a gradient-preserving perturbation to the batch seen in ``fit``."""

    def __init__(self, model=None, method="factored", scale=1.0, random_state=0):
        self.model = model
        self.method = method
        self.scale = scale
        self.random_state = random_state

    def fit(self, X, Y):
        params = _resolve_params(self.model)
        self.batch_ = check_batch(X, Y, params.weights[-1].shape[1])
        self.basis_ = perturbation_basis(params, self.batch_, self.method)
        res = perturb_forge(params, self.batch_, self.scale, self.random_state, self.method)
        self.forged_ = res.forged_batch
        self.approx_error_ = res.approx_error
        return self

    def transform(self, X):
        check_is_fitted(self, "forged_")
        X = check_array(X, dtype=np.float64)
        if not np.array_equal(X, self.batch_.X.T):
            raise ValueError("transform only applies to the batch given to fit")
        return self.forged_.X.T.copy()


class ErrorMatrixForger(TransformerMixin, BaseEstimator):
    """Single-layer forging by error-matrix sampling; forged labels in ``forged_Y_``."""

    def __init__(self, weights=None, bias=None, max_resamples=5, random_state=0):
        self.weights = weights
        self.bias = bias
        self.max_resamples = max_resamples
        self.random_state = random_state

    def fit(self, X, Y):
        W = check_array(self.weights, dtype=np.float64)
        self.batch_ = check_batch(X, Y, W.shape[1])
        res = error_matrix_forge(W, self.batch_, self.random_state, self.max_resamples, self.bias)
        self.forged_X_ = res.forged_batch.X.T.copy()
        self.forged_Y_ = res.forged_batch.Y.T.copy()
        self.approx_error_ = res.approx_error
        return self

    def transform(self, X):
        check_is_fitted(self, "forged_X_")
        X = check_array(X, dtype=np.float64)
        if X.shape != self.forged_X_.shape:
            raise ValueError(f"expected shape {self.forged_X_.shape}, got {X.shape}")
        return self.forged_X_.copy()
