"""Contribution evaluation: coalition utilities, Shapley variants, LOO and ADP.

Coalitions are encoded as bitmasks over 0-based client indices. Any object
with an integer attribute ``K`` and a method ``value(mask) -> float`` can act
as the cooperative game; :class:`CoalitionEvaluator` is the federated one.
"""

from __future__ import annotations

import itertools
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import ConfigError, check_positive_int, check_real
from .aggregation import RoundUpdateSet, fed_avg
from .numerics import _logits, loss_and_grad

logger = logging.getLogger(__name__)

METHODS = ("SV", "GTG", "LOO", "ADP")
UTILITIES = ("neg_loss", "accuracy")
MAX_EXACT_CLIENTS = 16
_ENUMERATE_TAILS_UP_TO = 40320


def mask_of(subset) -> int:
    mask = 0
    for k in subset:
        mask |= 1 << int(k)
    return mask


def members(mask: int) -> list[int]:
    return [k for k in range(mask.bit_length()) if mask >> k & 1]


class CoalitionEvaluator:
    """Utility ``v(S)`` of the FedAvg aggregate of clients ``S``.

    ``v(empty)`` is the utility of the previous global model. Values are
    memoised per bitmask when ``use_cache`` is set; ``hits`` and ``misses``
    count cache traffic.
    """

    def __init__(self, updates: RoundUpdateSet, validation, utility: str = "neg_loss",
                 use_cache: bool = True):
        if utility not in UTILITIES:
            raise ConfigError(f"unknown utility {utility!r}", "utility")
        if validation is None or len(validation.labels) == 0:
            raise ConfigError("coalition evaluation needs a nonempty validation set")
        self.updates = updates
        self.validation = validation
        self.utility = utility
        self.use_cache = use_cache
        self.cache: dict[int, float] = {}
        self.hits = 0
        self.misses = 0

    @property
    def K(self) -> int:
        return self.updates.K

    @property
    def full_mask(self) -> int:
        return (1 << self.K) - 1

    def aggregate(self, mask: int):
        if mask == 0:
            return self.updates.prev_global
        return fed_avg(self.updates, members(mask))

    def evaluate(self, params) -> float:
        X, y = self.validation.features, self.validation.labels
        if self.utility == "neg_loss":
            loss, _ = loss_and_grad(params.arch, params.values, X, y, need_grad=False)
            return -loss
        z, _ = _logits(params.arch, params.values, X)
        return float(np.mean(np.argmax(z, axis=1) == y))

    def value(self, mask: int) -> float:
        if not 0 <= mask <= self.full_mask:
            raise ConfigError(f"coalition mask {mask} out of range for K={self.K}")
        if self.use_cache:
            cached = self.cache.get(mask)
            if cached is not None:
                self.hits += 1
                return cached
        self.misses += 1
        result = self.evaluate(self.aggregate(mask))
        if self.use_cache:
            self.cache.setdefault(mask, result)
            return self.cache[mask]
        return result

    def __call__(self, subset) -> float:
        return self.value(mask_of(subset))


class TabularGame:
    """A cooperative game given by an explicit value table or callable."""

    def __init__(self, K: int, values):
        self.K = check_positive_int(K, "K")
        self._values = values

    def value(self, mask: int) -> float:
        if callable(self._values):
            return float(self._values(mask))
        return float(self._values[mask])


@dataclass(frozen=True, eq=False)
class ScoreVector:
    """Per-client scores of one CE method; ``skipped`` marks a GTG-truncated round."""

    values: np.ndarray = field(repr=False)
    method: str
    round: int = 0
    skipped: bool = False

    def __post_init__(self):
        values = np.asarray(self.values, dtype=np.float64).ravel()
        if values.size == 0:
            raise ConfigError("score vector is empty")
        object.__setattr__(self, "values", values)

    @property
    def K(self) -> int:
        return int(self.values.shape[0])

    def __len__(self):
        return self.K

    def __iter__(self):
        return iter(self.values)


@dataclass(frozen=True)
class GtgConfig:
    eps0: float = 0.0002
    eps1: float = 0.75
    eps2: float = 0.0001
    max_permutations: int = 100

    def __post_init__(self):
        check_real(self.eps0, "gtg.eps0", low=0.0)
        check_real(self.eps1, "gtg.eps1", low=0.0, high=1.0, low_open=True)
        check_real(self.eps2, "gtg.eps2", low=0.0)
        check_positive_int(self.max_permutations, "gtg.max_permutations")

    def n_permutations(self, K: int) -> int:
        return max(1, math.ceil(self.eps1 * min(math.factorial(K), self.max_permutations) - 1e-12))


def exact_shapley(game, method: str = "SV", round: int = 0) -> ScoreVector:
    """Shapley values by full coalition enumeration."""
    K = game.K
    if K > MAX_EXACT_CLIENTS:
        raise ConfigError(f"exact Shapley enumeration is limited to {MAX_EXACT_CLIENTS} clients, got {K}")
    values = np.array([game.value(m) for m in range(1 << K)])
    sizes = np.array([bin(m).count("1") for m in range(1 << K)])
    weight = np.array([1.0 / (K * math.comb(K - 1, s)) if s < K else 0.0 for s in range(K + 1)])
    scores = np.zeros(K)
    for k in range(K):
        bit = 1 << k
        without = np.array([m for m in range(1 << K) if not m & bit])
        scores[k] = np.sum(weight[sizes[without]] * (values[without | bit] - values[without]))
    return ScoreVector(scores, method, round)


def guided_permutations(K: int, count: int, rng: np.random.Generator) -> list[tuple[int, ...]]:
    """Permutations whose leading client cycles 0, 1, ..., K-1, 0, ...

    For each leader the orderings of the remaining clients are drawn without
    replacement (a shuffled enumeration), so ``count == K!`` covers every
    permutation exactly once.
    """
    K = check_positive_int(K, "K")
    if count <= 0:
        return []
    tail_count = math.factorial(K - 1)
    per_leader = [count // K + (1 if leader < count % K else 0) for leader in range(K)]
    tails = []
    for leader in range(K):
        others = [j for j in range(K) if j != leader]
        need = per_leader[leader]
        if need == 0:
            tails.append([])
        elif tail_count <= _ENUMERATE_TAILS_UP_TO:
            every = list(itertools.permutations(others))
            order = rng.permutation(len(every))
            tails.append([every[order[i % len(every)]] for i in range(need)])
        else:
            tails.append([tuple(rng.permutation(others).tolist()) for _ in range(need)])
    used = [0] * K
    out = []
    for j in range(count):
        leader = j % K
        out.append((leader,) + tuple(tails[leader][used[leader]]))
        used[leader] += 1
    return out


@dataclass(frozen=True)
class GtgTrace:
    """Which marginals a GTG evaluation used.

    ``terms`` holds ``(client, prefix_mask)`` for every counted marginal;
    the score of client ``k`` is the sum of ``v(prefix | k) - v(prefix)``
    over its terms divided by ``n_permutations``.
    """

    skipped: bool
    n_permutations: int
    terms: tuple


def gtg_trace(game, cfg: GtgConfig, permutations) -> GtgTrace:
    K = game.K
    full = (1 << K) - 1
    if abs(game.value(full) - game.value(0)) < cfg.eps0:
        return GtgTrace(True, len(permutations), ())
    terms = []
    for perm in permutations:
        prefix = 0
        for k in perm:
            terms.append((k, prefix))
            marginal = game.value(prefix | 1 << k) - game.value(prefix)
            prefix |= 1 << k
            if abs(marginal) < cfg.eps2:
                break
    return GtgTrace(False, len(permutations), tuple(terms))


def scores_from_trace(game, trace: GtgTrace) -> np.ndarray:
    scores = np.zeros(game.K)
    if trace.skipped:
        return scores
    for k, prefix in trace.terms:
        scores[k] += game.value(prefix | 1 << k) - game.value(prefix)
    return scores / trace.n_permutations


def gtg_shapley(game, cfg: GtgConfig, rng: np.random.Generator | None = None,
                permutations=None, round: int = 0) -> ScoreVector:
    """Guided truncated permutation Shapley.

    The round is skipped (all zeros) when ``|v(all) - v(empty)| < eps0``;
    otherwise ``ceil(eps1 * min(K!, max_permutations))`` guided permutations
    are scanned and each stops after the first marginal with magnitude below
    ``eps2``.
    """
    if permutations is None:
        if rng is None:
            raise ConfigError("gtg_shapley needs an rng or explicit permutations")
        permutations = guided_permutations(game.K, cfg.n_permutations(game.K), rng)
    trace = gtg_trace(game, cfg, permutations)
    return ScoreVector(scores_from_trace(game, trace), "GTG", round, skipped=trace.skipped)


def leave_one_out(game, round: int = 0) -> ScoreVector:
    K = game.K
    if K < 2:
        raise ConfigError("leave-one-out needs at least two clients")
    full = (1 << K) - 1
    total = game.value(full)
    return ScoreVector([total - game.value(full & ~(1 << k)) for k in range(K)], "LOO", round)


@dataclass(frozen=True, eq=False)
class AdpState:
    theta: np.ndarray = field(repr=False)
    t: int = 0

    @classmethod
    def initial(cls, K: int) -> "AdpState":
        return cls(np.zeros(K), 0)


def adp_score(theta) -> np.ndarray:
    """``(1 - exp(-1/theta)) / (1 + exp(-1/theta))``, equal to 1 at ``theta == 0``."""
    theta = np.asarray(theta, dtype=np.float64)
    out = np.ones_like(theta)
    pos = theta > 0
    out[pos] = np.tanh(0.5 / theta[pos])
    return out


def _cosine(a: np.ndarray, b: np.ndarray) -> float | None:
    na, nb = np.linalg.norm(a), np.linalg.norm(b)
    if na == 0 or nb == 0:
        return None
    return float(np.clip(a @ b / (na * nb), -1.0, 1.0))


def adp_round(state: AdpState, updates: RoundUpdateSet, global_params,
              on_deltas: bool = False, round: int | None = None) -> tuple[AdpState, ScoreVector]:
    """Advance the running angle average by one round and score every client.

    The cosine compares each client's weights with the aggregated weights;
    with ``on_deltas`` it compares ``w_k - w_prev`` with ``w_global - w_prev``.
    A zero-norm vector counts as orthogonal.
    """
    K = updates.K
    if state.theta.shape != (K,):
        raise ConfigError(f"ADP state tracks {state.theta.shape[0]} clients, round has {K}")
    reference = global_params.values
    if on_deltas:
        reference = reference - updates.prev_global.values
    cosines = np.empty(K)
    for k, u in enumerate(updates.updates):
        vec = u.values - updates.prev_global.values if on_deltas else u.values
        c = _cosine(vec, reference)
        if c is None:
            logger.warning("ADP: zero-norm vector for client %d in round %d; cosine set to 0", k, state.t)
            c = 0.0
        cosines[k] = c
    t = state.t
    theta = (t * state.theta + 1.0 - cosines) / (t + 1)
    new_state = AdpState(theta, t + 1)
    return new_state, ScoreVector(adp_score(theta), "ADP", t if round is None else round)


def normalize_scores(raw: ScoreVector) -> ScoreVector:
    """Shift so the minimum is 0, then scale to sum 1 (uniform if all equal)."""
    values = np.asarray(raw.values, dtype=np.float64)
    shifted = values - values.min()
    total = shifted.sum()
    if total > 0:
        normalized = shifted / total
    else:
        normalized = np.full(values.shape, 1.0 / values.shape[0])
    return replace(raw, values=normalized)


def aggregate_final_scores(rounds, include_skipped: bool = False) -> ScoreVector:
    """Mean of round-wise normalized scores, renormalized.

    Skipped (GTG-truncated) rounds are left out unless ``include_skipped``;
    if every round was skipped the result is uniform and marked skipped.
    """
    rounds = list(rounds)
    if not rounds:
        raise ConfigError("need at least one round of scores")
    methods = {r.method for r in rounds}
    if len(methods) != 1:
        raise ConfigError(f"cannot aggregate mixed methods {sorted(methods)}")
    method = rounds[0].method
    used = [r for r in rounds if include_skipped or not r.skipped]
    last = rounds[-1].round
    if not used:
        K = rounds[0].K
        return ScoreVector(np.full(K, 1.0 / K), method, last, skipped=True)
    mean = np.mean([r.values for r in used], axis=0)
    return normalize_scores(ScoreVector(mean, method, last))


def aggregate_raw_scores(rounds, how: str = "mean") -> np.ndarray:
    """Mean or sum of raw round-wise scores over non-skipped rounds."""
    used = [r.values for r in rounds if not r.skipped]
    if not used:
        return np.zeros(rounds[0].K)
    if how == "sum":
        return np.sum(used, axis=0)
    if how == "mean":
        return np.mean(used, axis=0)
    raise ConfigError(f"unknown round aggregation {how!r}", "score_rounds_aggregation")
