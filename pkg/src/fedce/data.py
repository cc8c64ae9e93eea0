"""Dataset synthesis, CSV ingestion, client partitioning and label corruption."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import dataclass, field, replace

import numpy as np

from ._validation import ConfigError, check_features, check_labels, check_positive_int, check_real

MAX_DIRICHLET_RETRIES = 100


@dataclass(frozen=True, eq=False)
class ClientDataset:
    """Feature/label store for one client (or for a full dataset).

    ``flags`` marks the samples whose label was touched by a corruption step
    (for linear noise: every re-assignment request, even if the redraw hit the
    original label).
    """

    features: np.ndarray = field(repr=False)
    labels: np.ndarray = field(repr=False)
    n_classes: int
    provenance: str = "clean"
    flags: np.ndarray | None = field(default=None, repr=False)

    def __post_init__(self):
        X = check_features(self.features)
        y = check_labels(self.labels, self.n_classes, X.shape[0])
        object.__setattr__(self, "features", X)
        object.__setattr__(self, "labels", y)
        if self.flags is None:
            object.__setattr__(self, "flags", np.zeros(len(y), dtype=bool))

    @property
    def n(self) -> int:
        return int(self.labels.shape[0])

    @property
    def d(self) -> int:
        return int(self.features.shape[1])

    def __len__(self):
        return self.n

    def subset(self, index) -> "ClientDataset":
        index = np.asarray(index, dtype=np.int64)
        return replace(self, features=self.features[index], labels=self.labels[index],
                       flags=self.flags[index])

    def class_histogram(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=self.n_classes)


@dataclass(frozen=True)
class SyntheticSource:
    n: int = 1000
    d: int = 5
    C: int = 3
    separation: float = 3.0


@dataclass(frozen=True)
class CsvSource:
    path: str
    label_column: str
    normalization: str = "zscore"
    base_dir: str = field(default="", compare=False)

    @property
    def resolved_path(self) -> str:
        """``path`` made absolute against ``base_dir`` (the config file's folder)."""
        return os.path.join(self.base_dir, self.path) if self.base_dir else self.path


@dataclass(frozen=True)
class DataConfig:
    """Where the data comes from and how it is split across clients.

    ``partition`` is ``"iid"`` or ``"dirichlet"`` (with ``alpha``); ``noise``
    is ``"none"`` or ``"linear"``. ``validation_fraction`` of the full
    dataset is held out as the server's validation set before partitioning.
    """

    source: SyntheticSource | CsvSource = field(default_factory=SyntheticSource)
    partition: str = "iid"
    alpha: float = 1.0
    noise: str = "none"
    validation_fraction: float = 0.25

    def __post_init__(self):
        if self.partition not in ("iid", "dirichlet"):
            raise ConfigError(f"unknown partition {self.partition!r}", "data.partition")
        if self.partition == "dirichlet":
            check_real(self.alpha, "data.alpha", low=0.0, low_open=True)
        if self.noise not in ("none", "linear"):
            raise ConfigError(f"unknown noise {self.noise!r}", "data.noise")
        check_real(self.validation_fraction, "data.validation_fraction",
                   low=0.0, high=1.0, low_open=True, high_open=True)


def generate_synthetic(n: int, d: int, C: int, separation: float, seed) -> ClientDataset:
    """Gaussian class clusters with unit covariance.

    Class ``c`` is centred on coordinate axis ``c mod d`` at distance
    ``separation * (1 + c // d) / sqrt(2)`` from the origin, so when
    ``d >= C`` every pair of class means is exactly ``separation`` apart.
    Class counts differ by at most one; rows are shuffled.
    """
    check_positive_int(C, "C", minimum=2)
    check_positive_int(d, "d")
    check_positive_int(n, "n")
    if n < C:
        raise ConfigError(f"need at least one sample per class: n={n} < C={C}", "n")
    separation = check_real(separation, "separation", low=0.0)
    rng = np.random.default_rng(seed)
    counts = np.full(C, n // C)
    counts[: n % C] += 1
    labels = np.repeat(np.arange(C), counts)
    means = np.zeros((C, d))
    for c in range(C):
        means[c, c % d] = separation * (1 + c // d) / math.sqrt(2.0)
    X = means[labels] + rng.standard_normal((n, d))
    order = rng.permutation(n)
    return ClientDataset(X[order], labels[order], C)


def train_validation_split(full: ClientDataset, fraction: float, seed) -> tuple[ClientDataset, ClientDataset]:
    """Stratified hold-out: ``round(fraction * n_c)`` samples of each class go to validation."""
    rng = np.random.default_rng(seed)
    train_idx, val_idx = [], []
    for c in range(full.n_classes):
        members = np.flatnonzero(full.labels == c)
        members = members[rng.permutation(len(members))]
        k = int(round(fraction * len(members)))
        val_idx.append(members[:k])
        train_idx.append(members[k:])
    train_idx = np.sort(np.concatenate(train_idx))
    val_idx = np.sort(np.concatenate(val_idx))
    if len(val_idx) == 0 or len(train_idx) == 0:
        raise ConfigError("validation split left an empty side", "data.validation_fraction")
    return full.subset(train_idx), full.subset(val_idx)


def largest_remainder(total: int, proportions: np.ndarray) -> np.ndarray:
    """Integer apportionment of ``total`` by the largest-remainder rule.

    Ties between equal remainders go to the lower index.
    """
    quotas = total * np.asarray(proportions, dtype=np.float64)
    counts = np.floor(quotas).astype(np.int64)
    short = total - int(counts.sum())
    if short > 0:
        order = np.argsort(-(quotas - counts), kind="stable")
        counts[order[:short]] += 1
    return counts


def iid_partition(full: ClientDataset, K: int, seed) -> list[ClientDataset]:
    K = check_positive_int(K, "K", minimum=2)
    if full.n < K:
        raise ConfigError(f"cannot give {K} clients a sample each from {full.n} samples", "K")
    rng = np.random.default_rng(seed)
    order = rng.permutation(full.n)
    return [full.subset(np.sort(part)) for part in np.array_split(order, K)]


def dirichlet_partition(full: ClientDataset, K: int, alpha: float, seed) -> list[ClientDataset]:
    """Label-skewed split: per class, client shares ~ Dirichlet(alpha * 1_K).

    Classes are processed in ascending order; within a class the samples are
    shuffled once and dealt out in client order. If some client ends up empty
    the whole draw is repeated (up to 100 times); after that, each empty
    client receives one sample from the currently largest client.
    """
    K = check_positive_int(K, "K", minimum=2)
    alpha = check_real(alpha, "alpha", low=0.0, low_open=True)
    hist = full.class_histogram()
    if np.any(hist == 0):
        raise ConfigError("every class needs at least one sample for a Dirichlet partition")
    if full.n < K:
        raise ConfigError(f"cannot give {K} clients a sample each from {full.n} samples", "K")
    rng = np.random.default_rng(seed)
    members = [np.flatnonzero(full.labels == c) for c in range(full.n_classes)]
    members = [m[rng.permutation(len(m))] for m in members]

    for _ in range(MAX_DIRICHLET_RETRIES):
        assignment = _dirichlet_draw(members, K, alpha, rng)
        if all(len(a) for a in assignment):
            break
    else:
        for k in range(K):
            if not assignment[k]:
                donor = max(range(K), key=lambda j: (len(assignment[j]), -j))
                if len(assignment[donor]) < 2:
                    raise ConfigError("cannot make every client nonempty")
                assignment[k].append(assignment[donor].pop())
    return [full.subset(np.sort(np.asarray(a, dtype=np.int64))) for a in assignment]


def _dirichlet_draw(members, K, alpha, rng):
    assignment = [[] for _ in range(K)]
    for idx in members:
        shares = rng.dirichlet(np.full(K, alpha))
        counts = largest_remainder(len(idx), shares)
        start = 0
        for k in range(K):
            assignment[k].extend(idx[start:start + counts[k]].tolist())
            start += counts[k]
    return assignment


def linear_noise_levels(K: int) -> np.ndarray:
    K = check_positive_int(K, "K", minimum=2)
    return np.arange(K) / (K - 1)


def inject_linear_label_noise(clients: list[ClientDataset], seed) -> list[ClientDataset]:
    """Client ``k`` (0-based) relabels each sample with probability ``k / (K-1)``.

    A relabel draws uniformly over all classes, the original included.
    """
    levels = linear_noise_levels(len(clients))
    rng = np.random.default_rng(seed)
    out = []
    for client, p in zip(clients, levels):
        request = rng.random(client.n) < p
        fresh = rng.integers(0, client.n_classes, size=client.n)
        labels = np.where(request, fresh, client.labels)
        if p == 0:
            out.append(client)
            continue
        out.append(replace(client, labels=labels, flags=request,
                           provenance=f"label_noise({p:.6g})"))
    return out


def load_csv(path, label_column: str, normalization: str = "zscore",
             categorical_columns=None) -> tuple[ClientDataset, list[str]]:
    """Read a headered UTF-8 CSV into a dataset.

    A feature column is numeric when more than half of its values parse as
    floats (or it is not listed in ``categorical_columns`` when that list is
    given); other columns are one-hot encoded with categories sorted. Output
    columns keep header order. Labels are the sorted distinct values of
    ``label_column``. Returns the dataset and the encoded feature names.
    """
    if normalization not in ("zscore", "none"):
        raise ConfigError(f"unknown normalization {normalization!r}", "normalization")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ConfigError(f"{path}: empty file") from None
        rows = []
        for line_no, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ConfigError(f"{path}: row {line_no} has {len(row)} fields, expected {len(header)}")
            rows.append((line_no, row))
    if label_column not in header:
        raise ConfigError(f"unknown label column {label_column!r}", "label_column")
    if not rows:
        raise ConfigError(f"{path}: no data rows")
    label_pos = header.index(label_column)

    columns, names = [], []
    for j, name in enumerate(header):
        if j == label_pos:
            continue
        values = [row[j].strip() for _, row in rows]
        if categorical_columns is not None:
            numeric = name not in categorical_columns
        else:
            numeric = sum(_is_float(v) for v in values) * 2 > len(values)
        if numeric:
            col = np.empty(len(rows))
            for i, ((line_no, _), v) in enumerate(zip(rows, values)):
                if not _is_float(v):
                    raise ConfigError(f"{path}: row {line_no}: column {name!r} value {v!r} is not numeric")
                col[i] = float(v)
            if normalization == "zscore":
                sd = col.std()
                col = (col - col.mean()) / (sd if sd > 0 else 1.0)
            columns.append(col[:, None])
            names.append(name)
        else:
            cats = sorted(set(values))
            onehot = np.array([[v == c for c in cats] for v in values], dtype=np.float64)
            columns.append(onehot)
            names.extend(f"{name}={c}" for c in cats)
    labels_raw = [row[label_pos].strip() for _, row in rows]
    classes = sorted(set(labels_raw))
    if len(classes) < 2:
        raise ConfigError(f"label column {label_column!r} has fewer than two classes", "label_column")
    lookup = {c: i for i, c in enumerate(classes)}
    X = np.hstack(columns) if columns else np.zeros((len(rows), 0))
    if X.shape[1] == 0:
        raise ConfigError(f"{path}: no feature columns besides the label")
    y = np.array([lookup[v] for v in labels_raw])
    return ClientDataset(X, y, len(classes)), names


def _is_float(text: str) -> bool:
    try:
        value = float(text)
    except ValueError:
        return False
    return math.isfinite(value)
