"""scikit-learn compatible wrappers around the network and kernel models.

>>> from sdkn.estimators import SDKNRegressor
>>> reg = SDKNRegressor(hidden_dims=(8, 8), epochs=5).fit(X, y)  # doctest: +SKIP
>>> reg.predict(X[:3])                                             # doctest: +SKIP

Sequence input of shape ``(n_samples, n_seq, n_features)`` requires a GRU
block (``gru_hidden``); flat input must not have one.
"""
from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, RegressorMixin, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import FilterSpec, Normalizer, apply_filter
from .exceptions import ConfigurationError
from .kernels import KernelSpec
from .model import (build_ann, build_sdkn, count_parameters, init_params, krr_fit,
                    layer_inputs)
from .trainer import TrainConfig, predict, train


def _check_inputs(X):
    X = check_array(X, allow_nd=True, dtype=np.float64, ensure_all_finite=True)
    if X.ndim > 3:
        raise ConfigurationError(f"expected 2D or 3D input, got {X.ndim}D")
    return X


def _check_targets(y, n):
    y = check_array(y, ensure_2d=False, dtype=np.float64, ensure_all_finite=True)
    if len(y) != n:
        raise ConfigurationError(f"{n} samples in X but {len(y)} in y")
    return y


class _NetworkRegressor(RegressorMixin, BaseEstimator):
    """Shared fit/predict plumbing; subclasses choose the block layout."""

    def _build_graph(self, d_in, d_out):
        raise NotImplementedError

    def fit(self, X, y):
        X = _check_inputs(X)
        y = _check_targets(y, len(X))
        self._y_1d = y.ndim == 1
        Y = y.reshape(len(y), -1)
        if X.ndim == 3 and self.gru_hidden is None:
            raise ConfigurationError("sequence input needs gru_hidden to be set")
        if X.ndim == 2 and self.gru_hidden is not None:
            raise ConfigurationError("a GRU block needs sequence input (n_samples, n_seq, n_features)")
        self.n_features_in_ = X.shape[-1]
        if self.normalize_inputs:
            self.input_normalizer_ = Normalizer().fit(X)
            X = self.input_normalizer_.transform(X)
        else:
            self.input_normalizer_ = None
        if self.normalize_targets:
            self.target_normalizer_ = Normalizer().fit(Y)
            Y = self.target_normalizer_.transform(Y)
        else:
            self.target_normalizer_ = None
        self.graph_ = self._build_graph(X.shape[-1], Y.shape[1])
        self.params_ = init_params(self.graph_, self.random_state, X)
        config = TrainConfig(self.batch_size, self.epochs, self.learning_rate,
                             self.halving_period, self.alpha, self.random_state)
        self.loss_curve_ = [r.train_mse for r in train(self.graph_, self.params_, X, Y, config).trace]
        self.n_parameters_ = count_parameters(self.graph_)
        return self

    def _prepare(self, X):
        check_is_fitted(self, "params_")
        X = _check_inputs(X)
        if X.shape[-1] != self.n_features_in_:
            raise ConfigurationError(f"expected {self.n_features_in_} features, got {X.shape[-1]}")
        return self.input_normalizer_.transform(X) if self.input_normalizer_ is not None else X

    def predict(self, X):
        X = self._prepare(X)
        out = predict(self.graph_, self.params_, X)
        if self.target_normalizer_ is not None:
            out = self.target_normalizer_.inverse_transform(out)
        return out[:, 0] if self._y_1d and out.shape[1] == 1 else out


class SDKNRegressor(TransformerMixin, _NetworkRegressor):
    """Structured deep kernel network trained with Adam on the mean squared error.

    Parameters
    ----------
    hidden_dims : sequence of int
        Widths of the linear-kernel layers; each is followed by an
        activation-kernel layer of the same width.
    gru_hidden : int or None
        Hidden size of the GRU block, inserted at ``gru_position`` in the
        block list.
    kernel, epsilon, n_centers :
        Scalar kernel of the activation layers and its expansion size.
    alpha : float
        Weight of the squared-l2 parameter penalty.

    ``transform`` returns the features entering the final linear layer, so
    a fitted network can serve as the feature map of
    :class:`KernelRidgeRegressor`.
    """

    def __init__(self, hidden_dims=(16, 32, 16), gru_hidden=None, gru_position=1,
                 kernel="gaussian", epsilon=1.0, n_centers=5, batch_size=128, epochs=25,
                 learning_rate=1e-3, halving_period=5, alpha=0.0, normalize_inputs=True,
                 normalize_targets=True, random_state=0):
        self.hidden_dims = hidden_dims
        self.gru_hidden = gru_hidden
        self.gru_position = gru_position
        self.kernel = kernel
        self.epsilon = epsilon
        self.n_centers = n_centers
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.halving_period = halving_period
        self.alpha = alpha
        self.normalize_inputs = normalize_inputs
        self.normalize_targets = normalize_targets
        self.random_state = random_state

    def _build_graph(self, d_in, d_out):
        return build_sdkn(d_in, self.hidden_dims, d_out, gru_hidden=self.gru_hidden,
                          gru_position=self.gru_position,
                          kernel=KernelSpec(self.kernel, self.epsilon), n_centers=self.n_centers)

    def transform(self, X):
        X = self._prepare(X)
        return layer_inputs(self.graph_, self.params_, X, len(self.graph_.blocks) - 1)


class ANNRegressor(_NetworkRegressor):
    """ReLU feed-forward network (optionally with a GRU block), same training loop."""

    def __init__(self, hidden_dims=(16, 32, 16), gru_hidden=None, gru_position=1,
                 batch_size=128, epochs=50, learning_rate=1e-3, halving_period=10, alpha=0.0,
                 normalize_inputs=True, normalize_targets=True, random_state=0):
        self.hidden_dims = hidden_dims
        self.gru_hidden = gru_hidden
        self.gru_position = gru_position
        self.batch_size = batch_size
        self.epochs = epochs
        self.learning_rate = learning_rate
        self.halving_period = halving_period
        self.alpha = alpha
        self.normalize_inputs = normalize_inputs
        self.normalize_targets = normalize_targets
        self.random_state = random_state

    def _build_graph(self, d_in, d_out):
        return build_ann(d_in, self.hidden_dims, d_out, gru_hidden=self.gru_hidden,
                         gru_position=self.gru_position)


class KernelRidgeRegressor(RegressorMixin, BaseEstimator):
    """Shallow kernel expansion over the training points.

    ``alpha`` is the ridge weight, scaled by the sample count inside the
    solve.  ``feature_map`` (e.g. a fitted ``SDKNRegressor.transform``)
    is applied to inputs before the kernel.
    """

    def __init__(self, kernel="gaussian", epsilon=1.0, alpha=0.0, feature_map=None):
        self.kernel = kernel
        self.epsilon = epsilon
        self.alpha = alpha
        self.feature_map = feature_map

    def _features(self, X):
        X = _check_inputs(X)
        if self.feature_map is not None:
            X = np.asarray(self.feature_map(X), dtype=np.float64)
        return X.reshape(len(X), -1)

    def fit(self, X, y):
        F = self._features(X)
        y = _check_targets(y, len(F))
        self.n_features_in_ = F.shape[1]
        self.model_ = krr_fit(KernelSpec(self.kernel, self.epsilon), F, y, self.alpha)
        return self

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.model_.predict(self._features(X))


class LESFilter(TransformerMixin, BaseEstimator):
    """Stateless transformer mapping fine-grid fields (rows) to filtered coarse values."""

    def __init__(self, family="top_hat", n_coarse=64, degree=0, cutoff=None):
        self.family = family
        self.n_coarse = n_coarse
        self.degree = degree
        self.cutoff = cutoff

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.spec_ = FilterSpec(self.family, self.n_coarse, self.degree, self.cutoff)
        self.spec_.validate(X.shape[1])
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, "spec_")
        return apply_filter(check_array(X, dtype=np.float64), self.spec_)
