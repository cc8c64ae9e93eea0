"""Byzantine baselines and score-poisoning attacks.

Marginal-difference scores (LOO, exact SV, GTG with a frozen permutation
sample) are linear combinations ``sum_S c_S v(S)`` of coalition utilities.
With the negative-loss utility and FedAvg coalitions, the attacker's weights
enter ``v(S)`` only through the aggregate ``w_S``, with coefficient
``n_a / n_S``; the score gradient follows by the chain rule.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, replace

import numpy as np

from ._validation import ConfigError, check_positive_int, check_real
from .aggregation import RoundUpdateSet
from .contribution import CoalitionEvaluator, GtgConfig, guided_permutations, gtg_trace, members
from .data import ClientDataset
from .numerics import ModelParams, loss_and_grad

logger = logging.getLogger(__name__)

KINDS = ("none", "label_flip", "gradient_flip", "self_improvement", "targeted_decrease")
SCORE_POISONING = ("self_improvement", "targeted_decrease")
MAX_HALVINGS = 30


@dataclass(frozen=True)
class AttackConfig:
    """Attack settings.

    ``rounds`` lists the 0-based rounds in which a score-poisoning attack is
    run (``None``: every round). ``mode`` selects between direct score ascent
    and the loss-minimisation surrogate for self improvement.
    """

    kind: str = "none"
    attacker_id: int = 0
    target_id: int = 1
    gamma: float = 0.001
    epsilon: float = 0.005
    val_fraction: float = 1.0
    steps: int = 50
    step_size: float = 0.1
    ce_method: str = "LOO"
    mode: str = "direct"
    rounds: tuple | None = None

    def __post_init__(self):
        if self.kind not in KINDS:
            raise ConfigError(f"unknown attack kind {self.kind!r}", "attack.kind")
        check_positive_int(self.attacker_id, "attack.attacker_id", minimum=0)
        check_positive_int(self.target_id, "attack.target_id", minimum=0)
        if self.kind == "targeted_decrease" and self.target_id == self.attacker_id:
            raise ConfigError("targeted_decrease needs target_id != attacker_id", "attack.target_id")
        check_real(self.gamma, "attack.gamma", low=0.0)
        check_real(self.epsilon, "attack.epsilon", low=0.0, low_open=True)
        check_real(self.val_fraction, "attack.val_fraction", low=0.0, high=1.0, low_open=True)
        check_positive_int(self.steps, "attack.steps", minimum=0)
        check_real(self.step_size, "attack.step_size", low=0.0, low_open=True)
        if self.ce_method not in ("LOO", "GTG", "SV"):
            raise ConfigError(f"score attacks target LOO, GTG or SV, got {self.ce_method!r}",
                              "attack.ce_method")
        if self.mode not in ("direct", "surrogate"):
            raise ConfigError(f"unknown attack mode {self.mode!r}", "attack.mode")
        if self.rounds is not None:
            object.__setattr__(self, "rounds", tuple(int(r) for r in self.rounds))

    def active_in(self, t: int) -> bool:
        return self.kind in SCORE_POISONING and (self.rounds is None or t in self.rounds)


@dataclass(frozen=True)
class AttackOutcome:
    """Result of one attack invocation.

    ``score_before``/``score_after`` are the attacker's own estimates of the
    attacked score (attacker's score for self improvement, target's score
    for targeted decrease) on its validation view. ``constraint`` is the
    squared loss gap to the benign-only aggregate (targeted decrease only).
    """

    update: ModelParams
    score_before: float
    score_after: float
    objective_before: float
    objective_after: float
    steps_taken: int
    constraint: float | None = None
    feasible: bool = True
    flagged: bool = False


def label_flip(data: ClientDataset, rng=None) -> ClientDataset:
    """Shift every label to the next class, ``y -> (y + 1) mod C``."""
    if data.n_classes < 2:
        raise ConfigError("label flipping needs at least two classes")
    return replace(data, labels=(data.labels + 1) % data.n_classes,
                   flags=np.ones(data.n, dtype=bool), provenance="label_flipped")


def gradient_flip(honest_update: ModelParams, prev_global: ModelParams) -> ModelParams:
    """Reflect the honest update delta about the previous global model."""
    if honest_update.arch != prev_global.arch:
        raise ConfigError("update and global model architectures differ")
    return prev_global.with_values(2.0 * prev_global.values - honest_update.values)


def validation_view(validation: ClientDataset, fraction: float, seed) -> ClientDataset:
    """The attacker's share of the server validation set (at least one sample)."""
    fraction = check_real(fraction, "val_fraction", low=0.0, high=1.0, low_open=True)
    if fraction == 1.0:
        return validation
    rng = np.random.default_rng(seed)
    count = max(1, math.ceil(fraction * validation.n))
    return validation.subset(np.sort(rng.permutation(validation.n)[:count]))


def score_coefficients(game, method: str, client: int, gtg: GtgConfig | None = None,
                       permutations=None) -> dict[int, float]:
    """Coefficients ``c_S`` with ``score(client) = sum_S c_S v(S)``.

    For GTG the truncation pattern is the one observed at the game's current
    values, so the representation is exact locally.
    """
    K = game.K
    full = (1 << K) - 1
    bit = 1 << client
    coefs: dict[int, float] = {}

    def add(mask, c):
        coefs[mask] = coefs.get(mask, 0.0) + c

    if method == "LOO":
        add(full, 1.0)
        add(full & ~bit, -1.0)
    elif method == "SV":
        for mask in range(1 << K):
            if mask & bit:
                continue
            w = 1.0 / (K * math.comb(K - 1, bin(mask).count("1")))
            add(mask | bit, w)
            add(mask, -w)
    elif method == "GTG":
        if gtg is None or permutations is None:
            raise ConfigError("GTG coefficients need a GTG config and a permutation sample")
        trace = gtg_trace(game, gtg, permutations)
        for k, prefix in trace.terms:
            if k == client:
                add(prefix | bit, 1.0 / trace.n_permutations)
                add(prefix, -1.0 / trace.n_permutations)
    else:
        raise ConfigError(f"no coalition form for method {method!r}")
    return {m: c for m, c in coefs.items() if c != 0.0}


def score_and_gradient(updates: RoundUpdateSet, attacker: int, client: int, method: str,
                       view: ClientDataset, gtg: GtgConfig | None = None,
                       permutations=None) -> tuple[float, np.ndarray]:
    """``client``'s score under ``method`` and its gradient w.r.t. the attacker's weights.

    Utility is the negative validation loss on ``view``.
    """
    game = CoalitionEvaluator(updates, view, "neg_loss")
    coefs = score_coefficients(game, method, client, gtg, permutations)
    abit = 1 << attacker
    X, y = view.features, view.labels
    score = 0.0
    grad = np.zeros(updates.arch.n_params)
    for mask, c in coefs.items():
        score += c * game.value(mask)
        if mask & abit:
            params = game.aggregate(mask)
            _, g = loss_and_grad(params.arch, params.values, X, y)
            n_s = updates.sizes[members(mask)].sum()
            grad -= c * (updates.sizes[attacker] / n_s) * g
    return score, grad


def _attack_permutations(method, K, gtg, rng):
    if method != "GTG":
        return None
    if gtg is None:
        raise ConfigError("a GTG attack needs a GTG config")
    if rng is None:
        rng = np.random.default_rng(0)
    return guided_permutations(K, gtg.n_permutations(K), rng)


def self_improvement(updates: RoundUpdateSet, attacker: int, view: ClientDataset, cfg: AttackConfig,
                     gtg: GtgConfig | None = None, rng: np.random.Generator | None = None,
                     permutations=None) -> AttackOutcome:
    """Craft the attacker's update to maximise its own score.

    ``updates`` holds the benign updates plus the attacker's honest update at
    index ``attacker``. Direct mode runs normalised gradient ascent from the
    honest update: each step moves ``step_size`` along the score gradient and
    is kept only if the score improves, otherwise the step length is halved.
    The best iterate is returned, so the score never drops below the honest
    one. Surrogate mode instead runs ``steps`` gradient-descent steps of the
    attacker's own loss on the validation view.
    """
    method = cfg.ce_method
    honest = updates.updates[attacker]
    if permutations is None:
        permutations = _attack_permutations(method, updates.K, gtg, rng)

    def evaluate(w):
        return score_and_gradient(updates.replace_update(attacker, honest.with_values(w)),
                                  attacker, attacker, method, view, gtg, permutations)

    w = honest.values.copy()
    score, grad = evaluate(w)
    start = score
    if cfg.mode == "surrogate":
        X, y = view.features, view.labels
        for _ in range(cfg.steps):
            _, g = loss_and_grad(honest.arch, w, X, y)
            w = w - cfg.step_size * g
        final, _ = evaluate(w)
        return AttackOutcome(honest.with_values(w), start, final, start, final, cfg.steps)

    step = cfg.step_size
    taken = 0
    for _ in range(cfg.steps):
        norm = np.linalg.norm(grad)
        if norm == 0:
            break
        candidate = w + step * grad / norm
        cand_score, cand_grad = evaluate(candidate)
        if cand_score > score:
            w, score, grad = candidate, cand_score, cand_grad
            taken += 1
        else:
            step /= 2
    return AttackOutcome(honest.with_values(w), start, score, start, score, taken)


def loss_gap(updates: RoundUpdateSet, attacker: int, view: ClientDataset) -> float:
    """Squared difference of view loss between the full and the benign-only FedAvg model."""
    game = CoalitionEvaluator(updates, view, "neg_loss", use_cache=False)
    full = (1 << updates.K) - 1
    return (game.value(full) - game.value(full & ~(1 << attacker))) ** 2


def targeted_decrease(updates: RoundUpdateSet, attacker: int, target: int, view: ClientDataset,
                      cfg: AttackConfig, gtg: GtgConfig | None = None,
                      rng: np.random.Generator | None = None, permutations=None) -> AttackOutcome:
    """Craft the attacker's update to minimise the target's score.

    Minimises ``score(target) + gamma * ||w_a||^2`` by normalised gradient
    descent. Every step is halved until the candidate both lowers the
    objective and keeps the squared loss gap to the benign-only aggregate
    below ``epsilon``; when no such step exists the search stops. If the
    honest update itself violates the constraint it is returned unchanged
    and the outcome is flagged.
    """
    if target == attacker:
        raise ConfigError("target and attacker must differ", "attack.target_id")
    method = cfg.ce_method
    honest = updates.updates[attacker]
    if permutations is None:
        permutations = _attack_permutations(method, updates.K, gtg, rng)

    def candidate_set(w):
        return updates.replace_update(attacker, honest.with_values(w))

    def evaluate(w):
        score, grad = score_and_gradient(candidate_set(w), attacker, target, method, view, gtg,
                                         permutations)
        return score, score + cfg.gamma * float(w @ w), grad + 2.0 * cfg.gamma * w

    w = honest.values.copy()
    score, objective, grad = evaluate(w)
    start_score, start_objective = score, objective
    gap = loss_gap(updates, attacker, view)
    if not gap < cfg.epsilon:
        logger.warning("targeted decrease: honest update already violates the loss constraint "
                       "(gap %.3g >= %.3g)", gap, cfg.epsilon)
        return AttackOutcome(honest, score, score, objective, objective, 0, gap, False, True)

    taken = 0
    for _ in range(cfg.steps):
        norm = np.linalg.norm(grad)
        if norm == 0:
            break
        length = cfg.step_size
        for _ in range(MAX_HALVINGS):
            candidate = w - length * grad / norm
            cand_gap = loss_gap(candidate_set(candidate), attacker, view)
            if cand_gap < cfg.epsilon:
                cand_score, cand_obj, cand_grad = evaluate(candidate)
                if cand_obj < objective:
                    break
            length /= 2
        else:
            break
        w, score, objective, grad, gap = candidate, cand_score, cand_obj, cand_grad, cand_gap
        taken += 1
    return AttackOutcome(honest.with_values(w), start_score, score, start_objective, objective,
                         taken, gap, True, False)
