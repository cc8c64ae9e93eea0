import numpy as np
import pytest

from fedce.aggregation import RoundUpdateSet
from fedce.data import ClientDataset
from fedce.numerics import Arch, ModelParams


def random_dataset(rng, n, d, C):
    X = rng.normal(size=(n, d))
    y = rng.integers(0, C, size=n)
    return ClientDataset(X, y, C)


def random_round(rng, K, d=3, C=3, h=0, n_val=40, spread=0.5):
    """A round with random client weights scattered around a random global model."""
    arch = Arch(d, h, C)
    prev = ModelParams(arch, rng.normal(scale=0.5, size=arch.n_params))
    updates = [prev.with_values(prev.values + rng.normal(scale=spread, size=arch.n_params))
               for _ in range(K)]
    sizes = rng.integers(5, 50, size=K)
    taus = rng.integers(1, 10, size=K)
    return RoundUpdateSet(prev, updates, sizes, taus), random_dataset(rng, n_val, d, C)


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def ad_statistic(pooled, labels):
    """Two-sample Anderson-Darling A^2 for continuous data, one row of labels per draw.

    ``labels`` is a boolean (draws, N) array marking membership of the first
    sample, with ``pooled`` already sorted ascending.
    """
    labels = np.atleast_2d(labels)
    N = labels.shape[1]
    j = np.arange(1, N)
    total = 0.0
    for member in (labels, ~labels):
        n_i = member[0].sum()
        counts = np.cumsum(member, axis=1)[:, :-1]
        total = total + ((N * counts - j * n_i) ** 2 / (j * (N - j))).sum(axis=1) / n_i
    return total / N


def ad_permutation_pvalue(a, b, draws=10_000, seed=0):
    pooled = np.concatenate([a, b])
    order = np.argsort(pooled, kind="stable")
    first = np.zeros(pooled.size, dtype=bool)
    first[: len(a)] = True
    observed = ad_statistic(pooled[order], first[order])[0]
    rng = np.random.default_rng(seed)
    shuffled = np.array([rng.permutation(first) for _ in range(draws)])
    null = ad_statistic(None, shuffled)
    return (1 + np.sum(null >= observed - 1e-12)) / (1 + draws)


_ACCEPTANCE = {}


@pytest.fixture
def acceptance_record():
    def record(n, ok, detail):
        _ACCEPTANCE[n] = (ok, detail)
    return record


def pytest_terminal_summary(terminalreporter):
    if not _ACCEPTANCE:
        return
    terminalreporter.section("acceptance criteria")
    for n in sorted(_ACCEPTANCE):
        ok, detail = _ACCEPTANCE[n]
        terminalreporter.write_line(f"criterion {n:2d}: {'PASS' if ok else 'FAIL'}  {detail}")
