"""Dataset ingestion and synthetic distributions with known class probabilities."""

from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .oracle import SyntheticDistribution

SYNTHETIC_KINDS = ("gaussian-blobs", "logistic-ground-truth")


@dataclass(frozen=True)
class LabeledExample:
    features: np.ndarray
    label: int


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    feature_names: list[str] = field(default_factory=list)
    vocabulary: dict[str, list[str]] = field(default_factory=dict)

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.labels.shape != (self.features.shape[0],):
            raise ValueError("features must be (n, d) with one label per row")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.num_classes):
            raise ValueError("label outside [0, m)")

    def __len__(self) -> int:
        return self.labels.size

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    @property
    def dim(self) -> int:
        return self.features.shape[1]

    def examples(self) -> list[LabeledExample]:
        return [LabeledExample(x, int(y)) for x, y in zip(self.features, self.labels)]

    def subset(self, idx) -> "Dataset":
        return Dataset(self.features[idx], self.labels[idx], self.class_names, self.feature_names, self.vocabulary)


def _parse_float(cell: str):
    try:
        value = float(cell)
    except ValueError:
        return None
    return value if np.isfinite(value) else None


def load_csv_dataset(path, label_column: str, one_hot_policy: str = "one-hot") -> Dataset:
    """Read a CSV with a header row.

    Class labels are numbered in order of first appearance.  With
    ``one_hot_policy="one-hot"`` non-numeric feature columns are expanded
    into indicator columns (vocabulary in first-appearance order); with
    ``"numeric"`` any non-numeric cell is an error.  Empty cells are always
    an error.
    """
    if one_hot_policy not in ("one-hot", "numeric"):
        raise ValueError(f"unknown categorical policy {one_hot_policy!r}")
    path = Path(path)
    with path.open(newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise ValueError(f"{path} is empty") from None
        rows = [row for row in reader if row]
    if label_column not in header:
        raise ValueError(f"label column {label_column!r} not found in {path}")
    label_idx = header.index(label_column)
    for r, row in enumerate(rows, start=2):
        if len(row) != len(header):
            raise ValueError(f"row {r}: expected {len(header)} cells, got {len(row)}")

    class_names: list[str] = []
    lookup: dict[str, int] = {}
    labels = []
    for row in rows:
        name = row[label_idx].strip()
        if name not in lookup:
            lookup[name] = len(class_names)
            class_names.append(name)
        labels.append(lookup[name])
    if len(class_names) < 2:
        raise ValueError(f"{path}: need at least two classes, found {class_names}")

    columns, names, vocabulary = [], [], {}
    for c, col in enumerate(header):
        if c == label_idx:
            continue
        cells = [row[c].strip() for row in rows]
        for r, cell in enumerate(cells, start=2):
            if cell == "":
                raise ValueError(f"row {r}, column {col!r}: empty cell")
        parsed = [_parse_float(cell) for cell in cells]
        if all(v is not None for v in parsed):
            columns.append(np.array(parsed, dtype=np.float64))
            names.append(col)
            continue
        if one_hot_policy == "numeric":
            r = next(i for i, v in enumerate(parsed) if v is None) + 2
            raise ValueError(f"row {r}, column {col!r}: cannot parse {cells[r - 2]!r} as a number")
        vocab = list(dict.fromkeys(cells))
        vocabulary[col] = vocab
        index = {v: i for i, v in enumerate(vocab)}
        codes = np.array([index[cell] for cell in cells])
        for i, v in enumerate(vocab):
            columns.append((codes == i).astype(np.float64))
            names.append(f"{col}={v}")
    features = np.column_stack(columns) if columns else np.zeros((len(rows), 0))
    return Dataset(features, np.array(labels), class_names, names, vocabulary)


def save_csv_dataset(dataset: Dataset, path, label_column: str = "label") -> None:
    names = dataset.feature_names or [f"x{i}" for i in range(dataset.dim)]
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([*names, label_column])
        for x, y in zip(dataset.features, dataset.labels):
            writer.writerow([repr(float(v)) for v in x] + [dataset.class_names[y]])


def _softmax(z):
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def make_synthetic(
    kind: str, dims: int, m: int, n: int, seed: int, base_noise: float = 0.5
) -> tuple[Dataset, SyntheticDistribution]:
    """Sample ``n`` labelled points from a distribution whose ``p(x)`` is known exactly.

    ``gaussian-blobs``: equal-prior unit-variance Gaussian classes, ``p(x)``
    is the Bayes posterior.  ``logistic-ground-truth``: standard normal
    features with a random linear-softmax ``p(x)``.  In both cases labels are
    drawn from ``p(x)``, and the distribution's ``g(x)`` is a perturbed copy
    of ``p(x)`` (parameters jittered by ``base_noise``).
    """
    if n < 1:
        raise ValueError("n must be positive")
    if kind not in SYNTHETIC_KINDS:
        raise ValueError(f"unknown synthetic kind {kind!r}")
    if m < 2 or dims < 1:
        raise ValueError("need m >= 2 classes and dims >= 1")
    rng = np.random.default_rng([seed, 0])

    if kind == "gaussian-blobs":
        means = rng.normal(0.0, 2.0, size=(m, dims))
        jitter = means + rng.normal(0.0, base_noise, size=means.shape)

        def posterior(mu):
            def fn(x):
                d2 = ((x[:, None, :] - mu[None, :, :]) ** 2).sum(axis=2)
                return _softmax(-0.5 * d2)

            return fn

        def sampler(r, k):
            cls = r.integers(0, m, size=k)
            return means[cls] + r.normal(size=(k, dims))

        p_fn, g_fn = posterior(means), posterior(jitter)
    else:
        w = rng.normal(0.0, 1.5, size=(dims, m))
        b = rng.normal(0.0, 0.5, size=m)
        wg = w + rng.normal(0.0, base_noise, size=w.shape)

        def p_fn(x):
            return _softmax(x @ w + b)

        def g_fn(x):
            return _softmax(x @ wg + b)

        def sampler(r, k):
            return r.normal(size=(k, dims))

    dist = SyntheticDistribution(p_fn, g_fn, sampler, seed, m)
    draw = np.random.default_rng([seed, 1])
    x = sampler(draw, n)
    p = p_fn(x)
    cum = np.cumsum(p, axis=1)
    u = draw.random(n)[:, None]
    labels = np.minimum((u > cum).sum(axis=1), m - 1)
    names = [f"x{i}" for i in range(dims)]
    return Dataset(x, labels, [str(k) for k in range(m)], names), dist
