"""Server-side aggregation rules: FedAvg/FedProx, FedNova, Krum and Zeno.

Client indices are 0-based. Every rule breaks ties towards the lowest index.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigError, check_positive_int, check_real
from .numerics import ModelParams, loss_and_grad

TIE_RTOL = 1e-12
RULES = ("fedavg", "fedprox", "fednova", "krum", "zeno")


@dataclass(frozen=True)
class AggregatorConfig:
    """``fedprox`` aggregates exactly like ``fedavg``; its change is client-side."""

    rule: str = "fedavg"
    kappa: int = 0
    rho: float = 100.0
    fednova_mode: str = "literal"

    def __post_init__(self):
        if self.rule not in RULES:
            raise ConfigError(f"unknown aggregation rule {self.rule!r}", "aggregator.rule")
        check_positive_int(self.kappa, "aggregator.kappa", minimum=0)
        check_real(self.rho, "aggregator.rho", low=0.0)
        if self.fednova_mode not in ("literal", "normalized"):
            raise ConfigError(f"unknown FedNova mode {self.fednova_mode!r}", "aggregator.fednova_mode")

    def check_clients(self, K: int):
        if self.rule == "krum" and K - self.kappa - 2 < 1:
            raise ConfigError(f"krum needs K - kappa - 2 >= 1, got K={K}, kappa={self.kappa}",
                              "aggregator.kappa")
        if self.rule == "zeno" and K - self.kappa < 1:
            raise ConfigError(f"zeno needs K - kappa >= 1, got K={K}, kappa={self.kappa}",
                              "aggregator.kappa")


@dataclass(frozen=True, eq=False)
class RoundUpdateSet:
    """Everything the server receives in one round."""

    prev_global: ModelParams
    updates: tuple
    sizes: np.ndarray = field(repr=False)
    taus: np.ndarray = field(repr=False)

    def __post_init__(self):
        updates = tuple(self.updates)
        if not updates:
            raise ConfigError("a round needs at least one client update")
        for u in updates:
            if u.arch != self.prev_global.arch:
                raise ConfigError("client update architecture differs from the global model")
        sizes = np.asarray(self.sizes, dtype=np.float64)
        taus = np.asarray(self.taus, dtype=np.float64)
        if sizes.shape != (len(updates),) or taus.shape != (len(updates),):
            raise ConfigError("sizes and taus must have one entry per update")
        if np.any(sizes <= 0) or np.any(taus <= 0):
            raise ConfigError("sizes and taus must be positive")
        object.__setattr__(self, "updates", updates)
        object.__setattr__(self, "sizes", sizes)
        object.__setattr__(self, "taus", taus)

    @property
    def K(self) -> int:
        return len(self.updates)

    @property
    def arch(self):
        return self.prev_global.arch

    def matrix(self) -> np.ndarray:
        """Client weights stacked as a (K, P) array."""
        return np.stack([u.values for u in self.updates])

    def deltas(self) -> np.ndarray:
        """Update vectors ``prev_global - w_k``, one row per client."""
        return self.prev_global.values[None, :] - self.matrix()

    def replace_update(self, k: int, update: ModelParams) -> "RoundUpdateSet":
        updates = list(self.updates)
        updates[k] = update
        return RoundUpdateSet(self.prev_global, updates, self.sizes, self.taus)


def _subset_indices(subset, K: int) -> np.ndarray:
    idx = np.unique(np.asarray(list(subset), dtype=np.int64))
    if idx.size == 0:
        raise ConfigError("cannot aggregate an empty subset of clients")
    if idx[0] < 0 or idx[-1] >= K:
        raise ConfigError(f"client index out of range for K={K}")
    return idx


def fedavg_weights(sizes: np.ndarray, subset) -> tuple[np.ndarray, np.ndarray]:
    idx = _subset_indices(subset, len(sizes))
    w = sizes[idx]
    return idx, w / w.sum()


def fed_avg(updates: RoundUpdateSet, subset=None) -> ModelParams:
    """Size-weighted average of the selected clients' weights (all by default)."""
    subset = range(updates.K) if subset is None else subset
    idx, w = fedavg_weights(updates.sizes, subset)
    values = np.zeros(updates.arch.n_params)
    for i, wi in zip(idx, w):
        values += wi * updates.updates[i].values
    return ModelParams(updates.arch, values)


def fed_nova(updates: RoundUpdateSet, mode: str = "literal") -> ModelParams:
    """Local-work-normalised aggregation.

    ``literal`` uses coefficients ``tau_k n_k / (tau n)``; ``normalized``
    multiplies them by K so that equal clients reduce to FedAvg.
    """
    coef = updates.taus * updates.sizes / (updates.taus.sum() * updates.sizes.sum())
    if mode == "normalized":
        coef = coef * updates.K
    elif mode != "literal":
        raise ConfigError(f"unknown FedNova mode {mode!r}", "aggregator.fednova_mode")
    values = updates.prev_global.values - coef @ updates.deltas()
    return ModelParams(updates.arch, values)


def krum_scores(updates: RoundUpdateSet, kappa: int) -> np.ndarray:
    K = updates.K
    m = K - kappa - 2
    if m < 1:
        raise ConfigError(f"krum needs K - kappa - 2 >= 1, got K={K}, kappa={kappa}", "kappa")
    W = updates.matrix()
    dist = np.sum((W[:, None, :] - W[None, :, :]) ** 2, axis=2)
    scores = np.empty(K)
    for k in range(K):
        others = np.delete(dist[k], k)
        scores[k] = np.sort(others)[:m].sum()
    return scores


def _ranked(scores: np.ndarray, descending: bool = False) -> np.ndarray:
    """Indices sorted by score; scores equal up to rounding keep index order."""
    keys = -scores if descending else scores
    scale = max(1.0, float(np.max(np.abs(keys))))
    snapped = np.round(keys / (scale * TIE_RTOL)) * TIE_RTOL
    return np.argsort(snapped, kind="stable")


def krum(updates: RoundUpdateSet, kappa: int) -> tuple[ModelParams, int]:
    scores = krum_scores(updates, kappa)
    selected = int(_ranked(scores)[0])
    return updates.updates[selected], selected


def zeno_scores(updates: RoundUpdateSet, rho: float, validation) -> np.ndarray:
    if validation is None or len(validation.labels) == 0:
        raise ConfigError("zeno needs a nonempty validation set")
    X, y = validation.features, validation.labels
    arch = updates.arch
    base, _ = loss_and_grad(arch, updates.prev_global.values, X, y, need_grad=False)
    scores = np.empty(updates.K)
    for k, u in enumerate(updates.updates):
        loss, _ = loss_and_grad(arch, u.values, X, y, need_grad=False)
        scores[k] = (base - loss) - rho * float(u.values @ u.values)
    return scores


def zeno(updates: RoundUpdateSet, kappa: int, rho: float, validation) -> tuple[ModelParams, list[int]]:
    """Keep the ``K - kappa`` best-scoring clients and size-average them."""
    keep = updates.K - kappa
    if keep < 1:
        raise ConfigError(f"zeno needs K - kappa >= 1, got K={updates.K}, kappa={kappa}", "kappa")
    scores = zeno_scores(updates, rho, validation)
    order = _ranked(scores, descending=True)
    kept = sorted(int(i) for i in order[:keep])
    return fed_avg(updates, kept), kept


@dataclass(frozen=True)
class AggregationResult:
    params: ModelParams
    krum_selected: int | None = None
    zeno_kept: tuple | None = None


def aggregate(updates: RoundUpdateSet, config: AggregatorConfig, validation=None) -> AggregationResult:
    config.check_clients(updates.K)
    if config.rule in ("fedavg", "fedprox"):
        return AggregationResult(fed_avg(updates))
    if config.rule == "fednova":
        return AggregationResult(fed_nova(updates, config.fednova_mode))
    if config.rule == "krum":
        params, selected = krum(updates, config.kappa)
        return AggregationResult(params, krum_selected=selected)
    params, kept = zeno(updates, config.kappa, config.rho, validation)
    return AggregationResult(params, zeno_kept=tuple(kept))
