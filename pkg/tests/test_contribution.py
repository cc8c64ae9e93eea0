import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fedce import ConfigError
from fedce.aggregation import RoundUpdateSet, fed_avg
from fedce.contribution import (AdpState, CoalitionEvaluator, GtgConfig, ScoreVector, TabularGame, adp_round,
                                adp_score, aggregate_final_scores, aggregate_raw_scores, exact_shapley,
                                guided_permutations, gtg_shapley, leave_one_out, mask_of, members,
                                normalize_scores)
from fedce.numerics import forward_loss

from conftest import random_round

NO_TRUNCATION = GtgConfig(eps0=0.0, eps1=1.0, eps2=0.0, max_permutations=10_000)


def permutation_shapley(value, K):
    """Average marginal over every ordering: the permutation form of the Shapley value."""
    total = np.zeros(K)
    for perm in itertools.permutations(range(K)):
        prefix = 0
        for k in perm:
            total[k] += value(prefix | 1 << k) - value(prefix)
            prefix |= 1 << k
    return total / math.factorial(K)


def random_game(rng, K):
    table = rng.normal(size=1 << K)
    return TabularGame(K, table), table


def test_mask_helpers():
    assert mask_of([0, 2]) == 5 and members(5) == [0, 2] and members(0) == []


def test_two_player_worked_example():
    game = TabularGame(2, {0: 0.0, 1: 0.3, 2: 0.1, 3: 0.5})
    np.testing.assert_allclose(exact_shapley(game).values, [0.35, 0.15], atol=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 5))
def test_exact_shapley_matches_permutation_oracle(seed, K):
    game, table = random_game(np.random.default_rng(seed), K)
    sv = exact_shapley(game).values
    np.testing.assert_allclose(sv, permutation_shapley(lambda m: table[m], K), atol=1e-12)
    assert abs(sv.sum() - (table[-1] - table[0])) < 1e-9


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 5))
def test_null_and_symmetric_players(seed, K):
    rng = np.random.default_rng(seed)
    base = rng.normal(size=1 << (K - 1))

    def null_last(mask):  # the last player never changes the value
        return base[mask & ((1 << (K - 1)) - 1)]

    assert abs(exact_shapley(TabularGame(K, null_last)).values[-1]) < 1e-12
    by_size = rng.normal(size=K + 1)
    sym = exact_shapley(TabularGame(K, lambda m: by_size[bin(m).count("1")])).values
    np.testing.assert_allclose(sym, sym[0], atol=1e-12)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 5))
def test_gtg_without_truncation_is_exact(seed, K):
    rng = np.random.default_rng(seed)
    game, _ = random_game(rng, K)
    gtg = gtg_shapley(game, NO_TRUNCATION, rng)
    np.testing.assert_allclose(gtg.values, exact_shapley(game).values, atol=1e-9)


def test_gtg_skips_flat_rounds():
    game = TabularGame(3, lambda m: 0.1 * bin(m).count("1"))
    out = gtg_shapley(game, GtgConfig(eps0=1e6), np.random.default_rng(0))
    assert out.skipped and np.all(out.values == 0)


def test_gtg_truncates_after_small_marginal():
    # v depends only on client 0; once 0 is in, later marginals are 0 and truncated
    game = TabularGame(3, lambda m: 1.0 if m & 1 else 0.0)
    perms = [(0, 1, 2), (1, 0, 2), (2, 1, 0)]
    out = gtg_shapley(game, GtgConfig(eps0=0.0, eps2=1e-3), permutations=perms)
    # (1, 0, 2): client 1's marginal is 0 so the scan stops before client 0 is reached
    np.testing.assert_allclose(out.values, [1 / 3, 0.0, 0.0])


def test_gtg_accepts_reference_thresholds():
    cfg = GtgConfig(eps0=0.0002, eps1=0.75, eps2=0.0001)
    assert cfg.n_permutations(5) == 75 and cfg.n_permutations(3) == 5
    with pytest.raises(ConfigError):
        GtgConfig(eps1=1.5)


@settings(max_examples=30, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 6), count=st.integers(1, 60))
def test_guided_permutations_rotate_leaders(seed, K, count):
    perms = guided_permutations(K, count, np.random.default_rng(seed))
    assert len(perms) == count
    assert [p[0] for p in perms] == [j % K for j in range(count)]
    assert all(sorted(p) == list(range(K)) for p in perms)
    if count <= math.factorial(K):
        assert len(set(perms)) == count


def test_guided_permutations_full_coverage():
    perms = guided_permutations(4, 24, np.random.default_rng(1))
    assert set(perms) == set(itertools.permutations(range(4)))


def test_loo_examples():
    game = TabularGame(2, {0: 0.0, 1: 0.7, 2: 0.5, 3: 0.9})
    np.testing.assert_allclose(leave_one_out(game).values, [0.4, 0.2])
    rng = np.random.default_rng(0)
    s, val = random_round(rng, 2)
    same = RoundUpdateSet(s.prev_global, [s.updates[0]] * 2, [10, 10], [1, 1])
    np.testing.assert_allclose(leave_one_out(CoalitionEvaluator(same, val)).values, 0.0, atol=1e-12)


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(2, 5))
def test_loo_matches_uncached_direct_path(seed, K):
    s, val = random_round(np.random.default_rng(seed), K)
    loo = leave_one_out(CoalitionEvaluator(s, val)).values
    full = -forward_loss(fed_avg(s), val).loss
    for k in range(K):
        rest = -forward_loss(fed_avg(s, [j for j in range(K) if j != k]), val).loss
        assert loo[k] == pytest.approx(full - rest, abs=1e-12)


def test_coalition_utility_definitions_and_cache():
    s, val = random_round(np.random.default_rng(2), 3)
    ev = CoalitionEvaluator(s, val)
    assert ev([]) == -forward_loss(s.prev_global, val).loss
    assert ev([1]) == -forward_loss(s.updates[1], val).loss
    before = ev.hits
    ev([0, 2])
    ev([2, 0])
    assert ev.hits == before + 1
    acc = CoalitionEvaluator(s, val, "accuracy")
    assert acc([0, 1, 2]) == forward_loss(fed_avg(s), val).accuracy


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), K=st.integers(1, 5))
def test_cache_is_sound(seed, K):
    s, val = random_round(np.random.default_rng(seed), K)
    cached, fresh = CoalitionEvaluator(s, val), CoalitionEvaluator(s, val, use_cache=False)
    for mask in list(range(1 << K)) * 2:
        assert cached.value(mask) == fresh.value(mask)


def test_adp_perfect_alignment_scores_one():
    s, _ = random_round(np.random.default_rng(3), 3)
    same = RoundUpdateSet(s.prev_global, [s.updates[0]] * 3, [1, 2, 3], [1, 1, 1])
    state = AdpState.initial(3)
    for _ in range(3):
        state, scores = adp_round(state, same, s.updates[0])
        np.testing.assert_array_equal(scores.values, 1.0)
    np.testing.assert_array_equal(state.theta, 0.0)


def test_adp_orthogonal_first_round():
    s, _ = random_round(np.random.default_rng(4), 2)
    arch = s.arch
    e0 = np.zeros(arch.n_params)
    e0[0] = 1.0
    e1 = np.zeros(arch.n_params)
    e1[1] = 1.0
    ortho = RoundUpdateSet(s.prev_global, [s.prev_global.with_values(e1)] * 2, [1, 1], [1, 1])
    _, scores = adp_round(AdpState.initial(2), ortho, s.prev_global.with_values(e0))
    np.testing.assert_allclose(scores.values, (1 - math.exp(-1)) / (1 + math.exp(-1)), atol=1e-15)
    assert scores.values[0] == pytest.approx(0.46212, abs=5e-6)


def test_adp_recursion_and_monotonicity():
    theta = np.array([0.0, 0.1, 0.5, 2.0])
    scores = adp_score(theta)
    assert scores[0] == 1.0 and np.all(np.diff(scores) < 0)
    s, _ = random_round(np.random.default_rng(5), 3)
    g = fed_avg(s)
    state = AdpState(np.array([0.2, 0.4, 0.6]), 2)
    new, _ = adp_round(state, s, g)
    cos = np.array([u.values @ g.values / np.linalg.norm(u.values) / np.linalg.norm(g.values) for u in s.updates])
    np.testing.assert_allclose(new.theta, (2 * state.theta + 1 - cos) / 3, atol=1e-14)
    assert new.t == 3


def test_adp_zero_vector_counts_as_orthogonal(caplog):
    s, _ = random_round(np.random.default_rng(6), 2)
    zero = s.prev_global.with_values(np.zeros(s.arch.n_params))
    z = RoundUpdateSet(s.prev_global, [zero, s.updates[1]], [1, 1], [1, 1])
    new, _ = adp_round(AdpState.initial(2), z, s.updates[1])
    assert new.theta[0] == 1.0 and "zero-norm" in caplog.text


@settings(max_examples=20, deadline=None)
@given(seed=st.integers(0, 2**32 - 1), scale=st.floats(0.01, 100.0))
def test_adp_ranking_is_scale_invariant(seed, scale):
    s, _ = random_round(np.random.default_rng(seed), 4)
    scaled = RoundUpdateSet(s.prev_global, [u.with_values(u.values * scale) for u in s.updates], s.sizes, s.taus)
    _, a = adp_round(AdpState.initial(4), s, fed_avg(s))
    _, b = adp_round(AdpState.initial(4), scaled, fed_avg(scaled))
    np.testing.assert_allclose(a.values, b.values, rtol=1e-9)


def test_normalize_examples():
    np.testing.assert_allclose(normalize_scores(ScoreVector([-1, 0, 1], "GTG")).values, [0, 1 / 3, 2 / 3])
    np.testing.assert_allclose(normalize_scores(ScoreVector([5, 5, 5], "GTG")).values, [1 / 3] * 3)


@settings(max_examples=50, deadline=None)
@given(raw=st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8))
def test_normalize_properties(raw):
    out = normalize_scores(ScoreVector(raw, "LOO")).values
    assert abs(out.sum() - 1) < 1e-12 and np.all(out >= 0)
    assert out.min() == 0 or np.all(out == out[0])
    again = normalize_scores(ScoreVector(out, "LOO")).values
    np.testing.assert_allclose(again, out, atol=1e-15)


def test_final_aggregation():
    rounds = [ScoreVector([1, 0, 0], "GTG", 0), ScoreVector([0, 1, 0], "GTG", 1)]
    np.testing.assert_allclose(aggregate_final_scores(rounds).values, [0.5, 0.5, 0])
    single = normalize_scores(ScoreVector([0.2, 0.5, 0.1], "GTG"))
    np.testing.assert_allclose(aggregate_final_scores([single]).values, single.values, atol=1e-15)
    skipped = ScoreVector([0, 0, 0], "GTG", 2, skipped=True)
    np.testing.assert_allclose(aggregate_final_scores(rounds + [skipped]).values, [0.5, 0.5, 0])
    assert aggregate_final_scores([skipped]).skipped
    with pytest.raises(ConfigError):
        aggregate_final_scores([rounds[0], ScoreVector([1, 0, 0], "LOO")])
    np.testing.assert_allclose(aggregate_raw_scores(rounds, "sum"), [1, 1, 0])
    np.testing.assert_allclose(aggregate_raw_scores(rounds, "mean"), [0.5, 0.5, 0])
