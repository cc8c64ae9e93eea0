"""Statistics used to compare score distributions and detect loss divergence."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np
from scipy import stats as sps

from ._validation import ConfigError, check_positive_int, check_real

AD_P_FLOOR = 0.001
AD_P_CAP = 0.25
TAILS = ("one_greater", "one_less", "two")


def anderson_darling_k2(sample_a, sample_b) -> float:
    """Two-sample Anderson-Darling p-value, clamped to [0.001, 0.25].

    Uses the midrank statistic with p-values interpolated from the
    Scholz-Stephens critical-value table (scipy's ``anderson_ksamp``).
    """
    a = np.asarray(sample_a, dtype=np.float64).ravel()
    b = np.asarray(sample_b, dtype=np.float64).ravel()
    if a.size < 2 or b.size < 2:
        raise ConfigError("each Anderson-Darling sample needs at least two values")
    if np.unique(np.concatenate([a, b])).size < 2:
        return AD_P_CAP
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        result = sps.anderson_ksamp([a, b], midrank=True)
    return float(np.clip(result.pvalue, AD_P_FLOOR, AD_P_CAP))


def paired_t_test(diffs, tail: str = "two") -> float:
    """p-value of a paired t-test on precomputed differences.

    ``one_greater`` tests mean > 0, ``one_less`` mean < 0, ``two`` mean != 0.
    Zero-variance differences give p = 0 in the tail their mean points to
    and p = 1 otherwise; all-zero differences give p = 1.
    """
    if tail not in TAILS:
        raise ConfigError(f"unknown tail {tail!r}; expected one of {TAILS}")
    d = np.asarray(diffs, dtype=np.float64).ravel()
    n = d.size
    if n < 2:
        raise ConfigError("paired t-test needs at least two differences")
    mean = d.mean()
    sd = d.std(ddof=1)
    if sd == 0 or not np.isfinite(sd):
        if mean == 0:
            return 1.0
        if tail == "two":
            return 0.0
        return 0.0 if (mean > 0) == (tail == "one_greater") else 1.0
    t = mean / (sd / np.sqrt(n))
    if tail == "one_greater":
        return float(sps.t.sf(t, n - 1))
    if tail == "one_less":
        return float(sps.t.cdf(t, n - 1))
    return float(min(1.0, 2.0 * sps.t.sf(abs(t), n - 1)))


def rmse(scores_a, scores_b) -> float:
    a = np.asarray(getattr(scores_a, "values", scores_a), dtype=np.float64).ravel()
    b = np.asarray(getattr(scores_b, "values", scores_b), dtype=np.float64).ravel()
    if a.shape != b.shape:
        raise ConfigError(f"score vectors differ in length: {a.size} vs {b.size}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


@dataclass(frozen=True)
class DivergenceFlag:
    flagged: bool
    first_round: int | None = None


def loss_divergence_monitor(trajectory, window: int = 3, factor: float = 1.5) -> DivergenceFlag:
    """Flag the first round whose trailing-window mean loss exceeds ``factor``
    times the smallest trailing-window mean seen before it.

    Rounds are 0-based positions in ``trajectory``.
    """
    window = check_positive_int(window, "window")
    factor = check_real(factor, "factor", low=0.0)
    losses = np.asarray(trajectory, dtype=np.float64).ravel()
    if losses.size < window:
        return DivergenceFlag(False)
    means = np.convolve(losses, np.ones(window) / window, mode="valid")
    best = means[0]
    for i in range(1, means.size):
        if means[i] > factor * best:
            return DivergenceFlag(True, i + window - 1)
        best = min(best, means[i])
    return DivergenceFlag(False)


def spearman(a, b) -> float:
    return float(sps.spearmanr(a, b).statistic)
