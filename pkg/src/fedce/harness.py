"""Round protocol and multi-seed experiments.

Randomness is derived from ``(seed, purpose, round, client)`` keys, so a
baseline run and an attack run that share a seed see identical data,
initialisation, benign updates in the first attacked round, and GTG
permutation samples.
"""

from __future__ import annotations

import hashlib
import json
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field, replace
from functools import lru_cache

import numpy as np

from ._validation import ConfigError, check_positive_int
from .aggregation import AggregatorConfig, RoundUpdateSet, aggregate
from .attacks import (AttackConfig, AttackOutcome, gradient_flip, label_flip, self_improvement,
                      targeted_decrease, validation_view)
from .contribution import (METHODS, UTILITIES, AdpState, CoalitionEvaluator, GtgConfig, ScoreVector,
                           aggregate_final_scores, aggregate_raw_scores, adp_round, exact_shapley,
                           gtg_shapley, leave_one_out, normalize_scores)
from .data import (ClientDataset, CsvSource, DataConfig, SyntheticSource, dirichlet_partition,
                   generate_synthetic, iid_partition, inject_linear_label_noise, load_csv,
                   train_validation_split)
from .numerics import Arch, ModelParams, TrainingHyperParams, forward_loss, init_params, local_train

logger = logging.getLogger(__name__)

FEDPROX_DEFAULT_MU = 1.0

# purpose tags for seed derivation
_DATA, _SPLIT, _PARTITION, _NOISE, _TAU, _INIT = 1, 2, 3, 4, 5, 6
_TRAIN, _VIEW, _ATTACK_PERM, _GTG = 100, 200, 201, 300


@dataclass(frozen=True)
class ExperimentConfig:
    """Declarative description of a run.

    ``training.mu = None`` means 1.0 under the ``fedprox`` rule and 0
    otherwise. ``tau_range`` draws each client's local step count uniformly
    from the inclusive range; ``None`` gives every client ``training.tau``.
    """

    K: int = 5
    T: int = 5
    repetitions: int = 10
    base_seed: int = 0
    data: DataConfig = field(default_factory=DataConfig)
    hidden: int = 0
    training: TrainingHyperParams = field(default_factory=TrainingHyperParams)
    tau_range: tuple | None = None
    aggregator: AggregatorConfig = field(default_factory=AggregatorConfig)
    ce_methods: tuple = ("GTG", "ADP")
    utility: str = "neg_loss"
    gtg: GtgConfig = field(default_factory=GtgConfig)
    adp_on_deltas: bool = False
    attack: AttackConfig = field(default_factory=AttackConfig)
    score_rounds_aggregation: str = "mean"
    name: str = "experiment"

    def __post_init__(self):
        K = check_positive_int(self.K, "K", minimum=2)
        check_positive_int(self.T, "T")
        check_positive_int(self.repetitions, "repetitions")
        check_positive_int(self.base_seed, "base_seed", minimum=0)
        check_positive_int(self.hidden, "hidden", minimum=0)
        object.__setattr__(self, "ce_methods", tuple(self.ce_methods))
        if not self.ce_methods:
            raise ConfigError("ce_methods must not be empty", "ce_methods")
        for m in self.ce_methods:
            if m not in METHODS:
                raise ConfigError(f"unknown CE method {m!r}", "ce_methods")
        if len(set(self.ce_methods)) != len(self.ce_methods):
            raise ConfigError("ce_methods contains duplicates", "ce_methods")
        if "SV" in self.ce_methods and K > 16:
            raise ConfigError("exact SV is limited to K <= 16", "ce_methods")
        if self.utility not in UTILITIES:
            raise ConfigError(f"unknown utility {self.utility!r}", "utility")
        if self.score_rounds_aggregation not in ("mean", "sum"):
            raise ConfigError("score_rounds_aggregation must be mean or sum", "score_rounds_aggregation")
        if self.tau_range is not None:
            lo, hi = (int(v) for v in self.tau_range)
            check_positive_int(lo, "tau_range")
            if hi < lo:
                raise ConfigError("tau_range must be [low, high] with low <= high", "tau_range")
            object.__setattr__(self, "tau_range", (lo, hi))
        self.aggregator.check_clients(K)
        atk = self.attack
        if atk.kind != "none":
            if atk.attacker_id >= K:
                raise ConfigError(f"attacker_id {atk.attacker_id} out of range for K={K}", "attack.attacker_id")
            if atk.kind == "targeted_decrease" and atk.target_id >= K:
                raise ConfigError(f"target_id {atk.target_id} out of range for K={K}", "attack.target_id")
            if atk.kind in ("self_improvement", "targeted_decrease") and self.utility != "neg_loss":
                raise ConfigError("score-poisoning attacks need the neg_loss utility", "utility")

    @property
    def effective_mu(self) -> float:
        if self.training.mu is not None:
            return self.training.mu
        return FEDPROX_DEFAULT_MU if self.aggregator.rule == "fedprox" else 0.0

    def canonical(self) -> dict:
        """Defaults-filled config as plain JSON types, without the display name."""
        out = asdict(self)
        out.pop("name", None)
        source = out["data"]["source"]
        source.pop("base_dir", None)
        source["kind"] = "csv" if isinstance(self.data.source, CsvSource) else "synthetic"
        return json.loads(json.dumps(out))

    def config_hash(self) -> str:
        text = json.dumps(self.canonical(), sort_keys=True, separators=(",", ":"))
        return hashlib.sha256(text.encode("utf-8")).hexdigest()

    @property
    def experiment_id(self) -> str:
        return self.config_hash()[:12]


def _rng(*key) -> np.random.Generator:
    return np.random.default_rng([int(k) for k in key])


@lru_cache(maxsize=8)
def _load_csv_cached(path, label_column, normalization):
    return load_csv(path, label_column, normalization)[0]


def load_full_dataset(data: DataConfig, seed: int) -> ClientDataset:
    src = data.source
    if isinstance(src, SyntheticSource):
        return generate_synthetic(src.n, src.d, src.C, src.separation, [seed, _DATA])
    return _load_csv_cached(src.resolved_path, src.label_column, src.normalization)


@dataclass(frozen=True, eq=False)
class RunSetup:
    """Per-repetition fixed context: clients, validation set, local work."""

    seed: int
    config: ExperimentConfig
    clients: tuple
    validation: ClientDataset
    taus: np.ndarray
    arch: Arch
    hp: TrainingHyperParams

    @property
    def sizes(self) -> np.ndarray:
        return np.array([c.n for c in self.clients], dtype=np.float64)

    @property
    def data_ratios(self) -> np.ndarray:
        return self.sizes / self.sizes.sum()


@dataclass(frozen=True, eq=False)
class RoundState:
    global_params: ModelParams
    adp: AdpState
    t: int = 0


@dataclass(frozen=True, eq=False)
class RoundRecord:
    t: int
    loss: float
    accuracy: float
    raw: dict
    normalized: dict
    submitted: RoundUpdateSet = field(repr=False)
    global_params: ModelParams = field(repr=False)
    krum_selected: int | None = None
    zeno_kept: tuple | None = None
    attack: AttackOutcome | None = None
    epsilon: float | None = None

    @property
    def attacker_score_delta(self) -> float | None:
        if self.attack is None:
            return None
        return self.attack.score_after - self.attack.score_before

    @property
    def constraint_slack(self) -> float | None:
        """``epsilon`` minus the squared loss gap of the submitted attacker update."""
        if self.attack is None or self.attack.constraint is None:
            return None
        return self.epsilon - self.attack.constraint


def setup_run(config: ExperimentConfig, seed: int, clients=None, validation=None) -> tuple[RunSetup, RoundState]:
    """Build the data split and the initial state for one repetition.

    ``clients``/``validation`` bypass data generation (used by the estimator
    and by tests that need hand-made clients).
    """
    K = config.K
    if clients is None:
        full = load_full_dataset(config.data, seed)
        train, validation = train_validation_split(full, config.data.validation_fraction, [seed, _SPLIT])
        if config.data.partition == "dirichlet":
            clients = dirichlet_partition(train, K, config.data.alpha, [seed, _PARTITION])
        else:
            clients = iid_partition(train, K, [seed, _PARTITION])
        if config.data.noise == "linear":
            clients = inject_linear_label_noise(clients, [seed, _NOISE])
    clients = list(clients)
    if len(clients) != K:
        raise ConfigError(f"expected {K} clients, got {len(clients)}", "K")
    if validation is None:
        raise ConfigError("a validation set is required")
    if config.attack.kind == "label_flip":
        a = config.attack.attacker_id
        clients[a] = label_flip(clients[a])
    if config.tau_range is not None:
        lo, hi = config.tau_range
        taus = _rng(seed, _TAU).integers(lo, hi + 1, size=K)
    else:
        taus = np.full(K, config.training.tau)
    d = clients[0].d
    C = clients[0].n_classes
    arch = Arch(d, config.hidden, C)
    hp = replace(config.training, mu=config.effective_mu)
    init = init_params(arch, _rng(seed, _INIT))
    setup = RunSetup(seed, config, tuple(clients), validation, taus.astype(np.int64), arch, hp)
    return setup, RoundState(init, AdpState.initial(K), 0)


def run_round(setup: RunSetup, state: RoundState) -> tuple[RoundState, RoundRecord]:
    """One federated round: local training, attacks, aggregation, scoring."""
    config = setup.config
    seed, t, K = setup.seed, state.t, config.K
    prev = state.global_params
    atk = config.attack

    updates = []
    for k, client in enumerate(setup.clients):
        w = local_train(prev, client, setup.hp, _rng(seed, _TRAIN, t, k), tau=int(setup.taus[k]))
        if atk.kind == "gradient_flip" and k == atk.attacker_id:
            w = gradient_flip(w, prev)
        updates.append(w)
    submitted = RoundUpdateSet(prev, updates, setup.sizes, setup.taus)

    outcome = None
    if atk.active_in(t):
        view = validation_view(setup.validation, atk.val_fraction, [seed, _VIEW, t])
        perm_rng = _rng(seed, _ATTACK_PERM, t)
        if atk.kind == "self_improvement":
            outcome = self_improvement(submitted, atk.attacker_id, view, atk, config.gtg, perm_rng)
        else:
            outcome = targeted_decrease(submitted, atk.attacker_id, atk.target_id, view, atk,
                                        config.gtg, perm_rng)
        submitted = submitted.replace_update(atk.attacker_id, outcome.update)

    agg = aggregate(submitted, config.aggregator, setup.validation)
    new_global = agg.params

    game = CoalitionEvaluator(submitted, setup.validation, config.utility)
    raw = {}
    adp = state.adp
    for method in config.ce_methods:
        if method == "SV":
            raw[method] = exact_shapley(game, round=t)
        elif method == "GTG":
            raw[method] = gtg_shapley(game, config.gtg, _rng(seed, _GTG, t), round=t)
        elif method == "LOO":
            raw[method] = leave_one_out(game, round=t)
        else:
            adp, raw[method] = adp_round(adp, submitted, new_global, config.adp_on_deltas, round=t)
    normalized = {m: normalize_scores(s) for m, s in raw.items()}

    ev = forward_loss(new_global, setup.validation)
    record = RoundRecord(t, ev.loss, ev.accuracy, raw, normalized, submitted, new_global,
                         agg.krum_selected, agg.zeno_kept, outcome, atk.epsilon)
    return RoundState(new_global, adp, t + 1), record


@dataclass(frozen=True, eq=False)
class RepetitionResult:
    seed: int
    records: tuple
    final: dict
    final_raw: dict
    data_ratios: np.ndarray

    @property
    def losses(self) -> np.ndarray:
        return np.array([r.loss for r in self.records])


@dataclass(frozen=True, eq=False)
class ExperimentResult:
    config: ExperimentConfig
    repetitions: tuple

    @property
    def experiment_id(self) -> str:
        return self.config.experiment_id

    def final_matrix(self, method: str) -> np.ndarray:
        """(repetitions, K) array of final normalized scores."""
        return np.array([r.final[method].values for r in self.repetitions])


def run_repetition(config: ExperimentConfig, seed: int, clients=None, validation=None) -> RepetitionResult:
    setup, state = setup_run(config, seed, clients, validation)
    records = []
    for _ in range(config.T):
        state, record = run_round(setup, state)
        records.append(record)
    final, final_raw = {}, {}
    for m in config.ce_methods:
        rounds = [r.normalized[m] for r in records]
        final[m] = aggregate_final_scores(rounds)
        final_raw[m] = aggregate_raw_scores([r.raw[m] for r in records], config.score_rounds_aggregation)
    return RepetitionResult(seed, tuple(records), final, final_raw, setup.data_ratios)


def run_experiment(config: ExperimentConfig, workers: int = 1) -> ExperimentResult:
    """Run every repetition with seed ``base_seed + r``; results are ordered by seed.

    With ``workers > 1`` repetitions run in a process pool. Each repetition
    draws only from its own seed, so the result does not depend on the
    schedule.
    """
    workers = check_positive_int(workers, "workers")
    seeds = [config.base_seed + r for r in range(config.repetitions)]
    if workers == 1 or len(seeds) == 1:
        reps = [run_repetition(config, s) for s in seeds]
    else:
        with ProcessPoolExecutor(max_workers=min(workers, len(seeds))) as pool:
            reps = list(pool.map(run_repetition, [config] * len(seeds), seeds))
    return ExperimentResult(config, tuple(reps))


def paired_runs(config: ExperimentConfig, workers: int = 1) -> tuple[ExperimentResult, ExperimentResult]:
    """Baseline (no score poisoning) and attacked runs sharing every seed."""
    if config.attack.kind not in ("self_improvement", "targeted_decrease"):
        raise ConfigError("paired attack runs need a score-poisoning attack kind", "attack.kind")
    baseline = replace(config, attack=replace(config.attack, kind="none"))
    return run_experiment(baseline, workers), run_experiment(config, workers)
