"""Scikit-learn-compatible facades over the training loop and linear probe.

``SslEncoder`` is a transformer: ``fit`` runs SSL pre-training on view pairs
(generating the second view by Gaussian perturbation when none is supplied)
and ``transform`` returns frozen embeddings.  ``MinNormLinearProbe`` is the
matching classifier over embeddings, backed by the same minimum-norm
least-squares solution the bound auditor uses.  Both compose with sklearn
pipelines and grid search via ``get_params``/``set_params``.
"""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin, TransformerMixin
from sklearn.exceptions import NotFittedError
from sklearn.utils.validation import check_array, check_X_y

from ssl_infolab.datagen import gaussian_view_pairs
from ssl_infolab.genbound import min_norm_probe, one_hot_labels
from ssl_infolab.losses import SslObjectiveConfig
from ssl_infolab.network import forward_batch, init_network
from ssl_infolab.trainer import PairDataset, TrainConfig, train_ssl


class SslEncoder(BaseEstimator, TransformerMixin):
    """Piecewise-affine encoder pre-trained with a named SSL objective."""

    def __init__(self, hidden_dims=(32, 32), embed_dim=8, activation="relu",
                 leaky_slope=0.1, objective="vicreg", view_noise=0.05,
                 epochs=100, batch_size=128, learning_rate=1e-2, optimizer="adam",
                 seed=0, alpha=25.0, beta_cov=1.0, gamma_inv=25.0, gamma_target=1.0,
                 epsilon=1e-4, entropy_plugin="none", temperature=0.5,
                 logdet_beta=1.0, entropy_weight=1.0, cov_mode="per_view",
                 diagnostics_every=100):
        self.hidden_dims = hidden_dims
        self.embed_dim = embed_dim
        self.activation = activation
        self.leaky_slope = leaky_slope
        self.objective = objective
        self.view_noise = view_noise
        self.epochs = epochs
        self.batch_size = batch_size
        self.learning_rate = learning_rate
        self.optimizer = optimizer
        self.seed = seed
        self.alpha = alpha
        self.beta_cov = beta_cov
        self.gamma_inv = gamma_inv
        self.gamma_target = gamma_target
        self.epsilon = epsilon
        self.entropy_plugin = entropy_plugin
        self.temperature = temperature
        self.logdet_beta = logdet_beta
        self.entropy_weight = entropy_weight
        self.cov_mode = cov_mode
        self.diagnostics_every = diagnostics_every

    def objective_config(self) -> SslObjectiveConfig:
        return SslObjectiveConfig(
            alpha=self.alpha, beta_cov=self.beta_cov, gamma_inv=self.gamma_inv,
            gamma_target=self.gamma_target, epsilon=self.epsilon,
            entropy_plugin=self.entropy_plugin, temperature=self.temperature,
            logdet_beta=self.logdet_beta, entropy_weight=self.entropy_weight,
            cov_mode=self.cov_mode)

    def train_config(self) -> TrainConfig:
        return TrainConfig(epochs=self.epochs, batch_size=self.batch_size,
                           learning_rate=self.learning_rate, optimizer=self.optimizer,
                           seed=self.seed, diagnostics_every=self.diagnostics_every)

    def fit(self, X, y=None, X_prime=None):
        X = check_array(X, dtype=np.float64)
        if X_prime is None:
            x, xp = gaussian_view_pairs(X, self.view_noise, self.seed)
        else:
            X_prime = check_array(X_prime, dtype=np.float64)
            if X_prime.shape != X.shape:
                raise ValueError("X_prime must match the shape of X")
            x, xp = X, X_prime
        labels = np.zeros(len(X), dtype=np.int64)
        pairs = PairDataset(x, xp, labels, probe_x=X,
                            input_cov_factors=np.repeat(
                                self.view_noise * np.eye(X.shape[1])[np.newaxis],
                                len(X), axis=0))
        net = init_network([X.shape[1], *self.hidden_dims, self.embed_dim],
                           self.activation, seed=self.seed, leaky_slope=self.leaky_slope)
        self.network_, self.trace_ = train_ssl(net, pairs, self.objective,
                                               self.objective_config(), self.train_config())
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        if not hasattr(self, "network_"):
            raise NotFittedError("SslEncoder is not fitted")
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, fitted on {self.n_features_in_}")
        return forward_batch(self.network_, X)


class MinNormLinearProbe(BaseEstimator, ClassifierMixin):
    """Minimum-norm (optionally ridge) least-squares probe with argmax decision."""

    def __init__(self, ridge=0.0):
        self.ridge = ridge

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        self.classes_ = np.unique(y)
        targets = one_hot_labels(y, self.classes_)
        self.coef_ = min_norm_probe(X.T, targets, ridge=self.ridge)
        self.n_features_in_ = X.shape[1]
        return self

    def decision_function(self, X):
        if not hasattr(self, "coef_"):
            raise NotFittedError("MinNormLinearProbe is not fitted")
        X = check_array(X, dtype=np.float64)
        return X @ self.coef_.T

    def predict(self, X):
        scores = self.decision_function(X)
        return self.classes_[np.argmax(scores, axis=1)]
