"""Small differentiable classifiers trained with plain numpy.

Two architectures are supported: multinomial logistic regression
(``hidden == 0``) and a one-hidden-layer tanh MLP. Parameters live in a flat
vector with a fixed layer-major layout::

    hidden == 0:  W (d x C), b (C)
    hidden  > 0:  W1 (d x h), b1 (h), W2 (h x C), b2 (C)

All weight matrices are stored row-major. Every function here is pure given an
explicit ``numpy.random.Generator``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from ._validation import ConfigError, check_features, check_labels, check_positive_int, check_real


@dataclass(frozen=True)
class Arch:
    """Architecture descriptor: input dim, hidden width (0 = none), classes."""

    d: int
    h: int
    C: int

    def __post_init__(self):
        check_positive_int(self.d, "arch.d")
        check_positive_int(self.h, "arch.h", minimum=0)
        check_positive_int(self.C, "arch.C", minimum=2)

    @property
    def n_params(self) -> int:
        if self.h == 0:
            return self.d * self.C + self.C
        return self.d * self.h + self.h + self.h * self.C + self.C

    def shapes(self) -> list[tuple[int, ...]]:
        if self.h == 0:
            return [(self.d, self.C), (self.C,)]
        return [(self.d, self.h), (self.h,), (self.h, self.C), (self.C,)]

    def unpack(self, values: np.ndarray) -> list[np.ndarray]:
        out, start = [], 0
        for shape in self.shapes():
            size = math.prod(shape)
            out.append(values[start:start + size].reshape(shape))
            start += size
        return out


@dataclass(frozen=True, eq=False)
class ModelParams:
    arch: Arch
    values: np.ndarray = field(repr=False)

    def __post_init__(self):
        values = np.array(self.values, dtype=np.float64, copy=True).ravel()
        if values.shape[0] != self.arch.n_params:
            raise ConfigError(
                f"parameter vector has length {values.shape[0]}, "
                f"architecture {self.arch} needs {self.arch.n_params}"
            )
        if not np.all(np.isfinite(values)):
            raise FloatingPointError("model parameters contain NaN or Inf")
        values.flags.writeable = False
        object.__setattr__(self, "values", values)

    def with_values(self, values) -> "ModelParams":
        return ModelParams(self.arch, values)

    def __eq__(self, other):
        if not isinstance(other, ModelParams):
            return NotImplemented
        return self.arch == other.arch and np.array_equal(self.values, other.values)

    def __hash__(self):
        return hash((self.arch, self.values.tobytes()))


@dataclass(frozen=True)
class TrainingHyperParams:
    """Client optimizer settings.

    ``tau`` counts minibatch steps; ``lambda_decay`` is applied once per full
    pass over the client's data. ``batch_size=None`` means full batch.
    ``mu=None`` leaves the proximal weight to the experiment (it acts as 0
    in ``local_train``).
    """

    eta: float = 0.1
    lambda_decay: float = 1.0
    nu: float = 0.0
    mu: float | None = None
    tau: int = 10
    batch_size: int | None = None

    def __post_init__(self):
        check_real(self.eta, "training.eta", low=0.0)
        check_real(self.lambda_decay, "training.lambda_decay", low=0.0, high=1.0, low_open=True)
        check_real(self.nu, "training.nu", low=0.0, high=1.0, high_open=True)
        if self.mu is not None:
            check_real(self.mu, "training.mu", low=0.0)
        check_positive_int(self.tau, "training.tau")
        if self.batch_size is not None:
            check_positive_int(self.batch_size, "training.batch_size")

    def lr_at_epoch(self, epoch: int) -> float:
        return self.eta * self.lambda_decay ** epoch


@dataclass(frozen=True)
class EvalResult:
    loss: float
    accuracy: float


def init_params(arch: Arch, rng: np.random.Generator) -> ModelParams:
    """Uniform(-1/sqrt(fan_in), 1/sqrt(fan_in)) initialisation, biases included."""
    fan_ins = [arch.d, arch.d] if arch.h == 0 else [arch.d, arch.d, arch.h, arch.h]
    parts = []
    for shape, fan_in in zip(arch.shapes(), fan_ins):
        bound = 1.0 / math.sqrt(fan_in)
        parts.append(rng.uniform(-bound, bound, size=math.prod(shape)))
    return ModelParams(arch, np.concatenate(parts))


def zeros(arch: Arch) -> ModelParams:
    return ModelParams(arch, np.zeros(arch.n_params))


def _logits(arch: Arch, values: np.ndarray, X: np.ndarray):
    if arch.h == 0:
        W, b = arch.unpack(values)
        return X @ W + b, None
    W1, b1, W2, b2 = arch.unpack(values)
    hidden = np.tanh(X @ W1 + b1)
    return hidden @ W2 + b2, hidden


def _log_softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def predict_proba(params: ModelParams, X) -> np.ndarray:
    X = check_features(X, params.arch.d)
    z, _ = _logits(params.arch, params.values, X)
    return np.exp(_log_softmax(z))


def loss_and_grad(arch: Arch, values: np.ndarray, X: np.ndarray, y: np.ndarray,
                  need_grad: bool = True):
    """Mean softmax cross-entropy and its gradient w.r.t. the flat parameters.

    Unchecked fast path; callers validate shapes.
    """
    n = X.shape[0]
    z, hidden = _logits(arch, values, X)
    logp = _log_softmax(z)
    rows = np.arange(n)
    loss = -logp[rows, y].mean()
    if not need_grad:
        return float(loss), None
    dz = np.exp(logp)
    dz[rows, y] -= 1.0
    dz /= n
    if arch.h == 0:
        grad = np.concatenate([(X.T @ dz).ravel(), dz.sum(axis=0)])
    else:
        _, _, W2, _ = arch.unpack(values)
        dW2 = hidden.T @ dz
        db2 = dz.sum(axis=0)
        dpre = (dz @ W2.T) * (1.0 - hidden ** 2)
        grad = np.concatenate([(X.T @ dpre).ravel(), dpre.sum(axis=0), dW2.ravel(), db2])
    return float(loss), grad


def _check_data(params: ModelParams, data):
    X = check_features(data.features, params.arch.d)
    if X.shape[0] == 0:
        raise ConfigError("evaluation data is empty")
    y = check_labels(data.labels, params.arch.C, X.shape[0])
    return X, y


def forward_loss(params: ModelParams, data) -> EvalResult:
    X, y = _check_data(params, data)
    z, _ = _logits(params.arch, params.values, X)
    logp = _log_softmax(z)
    loss = -logp[np.arange(len(y)), y].mean()
    accuracy = np.mean(np.argmax(z, axis=1) == y)
    return EvalResult(float(loss), float(accuracy))


def gradient(params: ModelParams, data, proximal_anchor: ModelParams | None = None,
             mu: float = 0.0) -> np.ndarray:
    """Gradient of ``f(w) + mu/2 * ||w - anchor||^2``."""
    X, y = _check_data(params, data)
    if mu < 0:
        raise ConfigError("mu must be non-negative", "mu")
    if mu > 0:
        if proximal_anchor is None:
            raise ConfigError("a proximal anchor is required when mu > 0", "mu")
        if proximal_anchor.arch != params.arch:
            raise ConfigError("proximal anchor architecture differs from params")
    _, grad = loss_and_grad(params.arch, params.values, X, y)
    if mu > 0:
        grad = grad + mu * (params.values - proximal_anchor.values)
    return grad


def local_train(start: ModelParams, data, hp: TrainingHyperParams,
                rng: np.random.Generator, tau: int | None = None) -> ModelParams:
    """Run ``tau`` SGD steps with momentum from ``start``.

    ``tau`` overrides ``hp.tau`` (per-client local work). Minibatches are
    consecutive slices of a fresh permutation drawn at the start of every
    pass; no draws are made in full-batch mode.
    """
    X, y = _check_data(start, data)
    steps = check_positive_int(hp.tau if tau is None else tau, "tau")
    n = X.shape[0]
    batch = n if hp.batch_size is None else min(hp.batch_size, n)
    per_epoch = math.ceil(n / batch)
    arch = start.arch
    anchor = start.values
    mu = hp.mu or 0.0
    w = start.values.copy()
    velocity = np.zeros_like(w)
    order = np.arange(n)
    for step in range(steps):
        epoch, pos = divmod(step, per_epoch)
        if batch < n and pos == 0:
            order = rng.permutation(n)
        idx = order[pos * batch:(pos + 1) * batch]
        _, g = loss_and_grad(arch, w, X[idx], y[idx])
        if mu > 0:
            g = g + mu * (w - anchor)
        velocity = hp.nu * velocity + g
        w = w - hp.lr_at_epoch(epoch) * velocity
    return ModelParams(arch, w)
