"""scikit-learn style wrapper: federate a classifier over an (X, y) table
and read off per-client contribution scores."""

from __future__ import annotations

import numpy as np
from sklearn.base import BaseEstimator, ClassifierMixin
from sklearn.utils.validation import check_is_fitted, check_X_y, validate_data

from .aggregation import AggregatorConfig
from .contribution import GtgConfig
from .data import ClientDataset, DataConfig, dirichlet_partition, iid_partition, train_validation_split
from .harness import ExperimentConfig, run_repetition
from .numerics import TrainingHyperParams, predict_proba


class FederatedContributionEstimator(ClassifierMixin, BaseEstimator):
    """Train a federated softmax model on ``n_clients`` splits of the data.

    After ``fit``, ``scores_`` maps each CE method to the final normalized
    per-client scores and ``data_ratios_`` holds each client's share of the
    training rows.
    """

    def __init__(self, n_clients=5, n_rounds=5, partition="iid", alpha=1.0, hidden=0, eta=0.1,
                 tau=10, batch_size=None, aggregator="fedavg", kappa=0, ce_methods=("GTG", "ADP"),
                 validation_fraction=0.25, random_state=0):
        self.n_clients = n_clients
        self.n_rounds = n_rounds
        self.partition = partition
        self.alpha = alpha
        self.hidden = hidden
        self.eta = eta
        self.tau = tau
        self.batch_size = batch_size
        self.aggregator = aggregator
        self.kappa = kappa
        self.ce_methods = ce_methods
        self.validation_fraction = validation_fraction
        self.random_state = random_state

    def _config(self) -> ExperimentConfig:
        return ExperimentConfig(
            K=self.n_clients, T=self.n_rounds, repetitions=1, base_seed=self.random_state,
            data=DataConfig(partition=self.partition, alpha=self.alpha,
                            validation_fraction=self.validation_fraction),
            hidden=self.hidden,
            training=TrainingHyperParams(eta=self.eta, tau=self.tau, batch_size=self.batch_size),
            aggregator=AggregatorConfig(rule=self.aggregator, kappa=self.kappa),
            ce_methods=tuple(self.ce_methods), gtg=GtgConfig(),
        )

    def fit(self, X, y):
        X, y = check_X_y(X, y, dtype=np.float64)
        config = self._config()
        self.classes_, codes = np.unique(y, return_inverse=True)
        if self.classes_.size < 2:
            raise ValueError("need at least two classes")
        self.n_features_in_ = X.shape[1]
        seed = config.base_seed
        full = ClientDataset(X, codes, self.classes_.size)
        train, validation = train_validation_split(full, config.data.validation_fraction, [seed, 2])
        if config.data.partition == "dirichlet":
            clients = dirichlet_partition(train, config.K, config.data.alpha, [seed, 3])
        else:
            clients = iid_partition(train, config.K, [seed, 3])
        rep = run_repetition(config, seed, clients, validation)
        self.model_ = rep.records[-1].global_params
        self.scores_ = {m: s.values.copy() for m, s in rep.final.items()}
        self.data_ratios_ = rep.data_ratios
        self.loss_curve_ = rep.losses
        return self

    def predict_proba(self, X):
        check_is_fitted(self, "model_")
        X = validate_data(self, X, reset=False, dtype=np.float64)
        return predict_proba(self.model_, X)

    def predict(self, X):
        check_is_fitted(self, "model_")
        return self.classes_[np.argmax(self.predict_proba(X), axis=1)]
