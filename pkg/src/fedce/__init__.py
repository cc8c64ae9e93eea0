"""Deterministic federated-learning testbed for contribution scores,
robust aggregation rules and score-poisoning attacks."""

from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source checkout
    __version__ = "0.0.0"

from ._validation import ConfigError
from .aggregation import AggregatorConfig, RoundUpdateSet, aggregate, fed_avg, fed_nova, krum, zeno
from .attacks import AttackConfig, self_improvement, targeted_decrease
from .contribution import (CoalitionEvaluator, GtgConfig, ScoreVector, aggregate_final_scores, adp_round,
                           exact_shapley, gtg_shapley, leave_one_out, normalize_scores)
from .data import ClientDataset, CsvSource, DataConfig, SyntheticSource
from .estimator import FederatedContributionEstimator
from .harness import ExperimentConfig, paired_runs, run_experiment, run_round, setup_run
from .numerics import Arch, ModelParams, TrainingHyperParams, local_train

__all__ = [
    "AggregatorConfig", "Arch", "AttackConfig", "ClientDataset", "CoalitionEvaluator", "ConfigError",
    "CsvSource", "DataConfig", "ExperimentConfig", "FederatedContributionEstimator", "GtgConfig",
    "ModelParams", "RoundUpdateSet", "ScoreVector", "SyntheticSource", "TrainingHyperParams",
    "adp_round", "aggregate", "aggregate_final_scores", "exact_shapley", "fed_avg", "fed_nova",
    "gtg_shapley", "krum", "leave_one_out", "local_train", "normalize_scores", "paired_runs",
    "run_experiment", "run_round", "self_improvement", "setup_run", "targeted_decrease", "zeno",
]
