"""One-hidden-layer softmax classifiers (fcn-x) with hand-written backprop and Adam."""

from __future__ import annotations

import base64
import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Iterator

import numpy as np

from .simplex import ScoringFunction

CHECKPOINT_VERSION = 1


class TrainingDiverged(FloatingPointError):
    """Raised when a forward pass or loss becomes non-finite."""

    def __init__(self, message: str, example_index: int | None = None):
        super().__init__(message)
        self.example_index = example_index


@dataclass
class MlpModel:
    input_dim: int
    hidden_dim: int
    num_classes: int
    params: np.ndarray = field(repr=False)

    def __post_init__(self):
        if self.num_classes < 2:
            raise ValueError("need at least two classes")
        if self.input_dim < 1 or self.hidden_dim < 1:
            raise ValueError("dimensions must be positive")
        self.params = np.ascontiguousarray(self.params, dtype=np.float64).reshape(-1)
        expected = self.param_count(self.input_dim, self.hidden_dim, self.num_classes)
        if self.params.size != expected:
            raise ValueError(f"expected {expected} parameters, got {self.params.size}")

    @staticmethod
    def param_count(d: int, h: int, m: int) -> int:
        return d * h + h + h * m + m

    @property
    def dims(self) -> tuple[int, int, int]:
        return self.input_dim, self.hidden_dim, self.num_classes

    def unpack(self, flat: np.ndarray | None = None):
        """Views ``(W1, b1, W2, b2)`` into ``flat`` (defaults to the model parameters)."""
        flat = self.params if flat is None else flat
        d, h, m = self.dims
        i = 0
        w1 = flat[i : i + d * h].reshape(d, h)
        i += d * h
        b1 = flat[i : i + h]
        i += h
        w2 = flat[i : i + h * m].reshape(h, m)
        i += h * m
        b2 = flat[i : i + m]
        return w1, b1, w2, b2

    def copy(self) -> "MlpModel":
        return MlpModel(*self.dims, params=self.params.copy())

    def predict(self, features) -> np.ndarray:
        return forward(self, features)


def _softmax(z: np.ndarray) -> np.ndarray:
    z = z - z.max(axis=1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=1, keepdims=True)


def _as_features(model: MlpModel, features) -> np.ndarray:
    x = np.asarray(features, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    if x.ndim != 2 or x.shape[1] != model.input_dim:
        raise ValueError(f"expected features with {model.input_dim} columns, got shape {x.shape}")
    return x


def forward(model: MlpModel, features) -> np.ndarray:
    """Softmax probabilities, one row per input."""
    x = _as_features(model, features)
    w1, b1, w2, b2 = model.unpack()
    hidden = np.maximum(x @ w1 + b1, 0.0)
    return _softmax(hidden @ w2 + b2)


@dataclass
class SoftTargetBatch:
    """Features paired with soft target rows.

    Target rows normally lie on the simplex.  ``subnormalized=True`` relaxes
    this to non-negative rows summing to at most one (anchor-style weights).
    """

    features: np.ndarray
    targets: np.ndarray
    subnormalized: bool = False

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.targets = np.asarray(self.targets, dtype=np.float64)
        if self.features.ndim != 2 or self.targets.ndim != 2:
            raise ValueError("features and targets must be 2-d")
        if self.features.shape[0] != self.targets.shape[0]:
            raise ValueError("features and targets differ in length")
        if np.any(self.targets < 0.0):
            raise ValueError("negative target entry")
        sums = self.targets.sum(axis=1)
        if self.subnormalized:
            bad = np.nonzero(sums > 1.0 + 1e-6)[0]
        else:
            bad = np.nonzero(np.abs(sums - 1.0) > 1e-6)[0]
        if bad.size:
            raise ValueError(f"target row {bad[0]} sums to {sums[bad[0]]}")

    def __len__(self) -> int:
        return self.features.shape[0]

    def take(self, idx) -> "SoftTargetBatch":
        return SoftTargetBatch(self.features[idx], self.targets[idx], self.subnormalized)


def loss_and_gradient(model: MlpModel, batch: SoftTargetBatch, phi: ScoringFunction):
    """Mean ``targets . phi(forward(x))`` over the batch and its exact gradient."""
    return _loss_and_gradient(model, batch.features, batch.targets, phi)


def _loss_and_gradient(model: MlpModel, x: np.ndarray, t: np.ndarray, phi: ScoringFunction):
    n = x.shape[0]
    if n == 0:
        raise ValueError("empty batch")
    w1, b1, w2, b2 = model.unpack()
    pre = x @ w1 + b1
    hidden = np.maximum(pre, 0.0)
    logits = hidden @ w2 + b2
    probs = _softmax(logits)
    per_example = phi.weighted(t, probs)
    if not np.all(np.isfinite(per_example)):
        i = int(np.nonzero(~np.isfinite(per_example))[0][0])
        raise TrainingDiverged(f"non-finite loss at example {i}", i)

    grad = np.empty_like(model.params)
    gw1, gb1, gw2, gb2 = model.unpack(grad)
    dz = phi.softmax_backward(t, probs) / n
    gw2[...] = hidden.T @ dz
    gb2[...] = dz.sum(axis=0)
    dh = (dz @ w2.T) * (pre > 0.0)
    gw1[...] = x.T @ dh
    gb1[...] = dh.sum(axis=0)
    return float(per_example.mean()), grad


def mean_loss(model: MlpModel, batch: SoftTargetBatch, phi: ScoringFunction) -> float:
    probs = forward(model, batch.features)
    values = phi.weighted(batch.targets, probs)
    if not np.all(np.isfinite(values)):
        i = int(np.nonzero(~np.isfinite(values))[0][0])
        raise TrainingDiverged(f"non-finite loss at example {i}", i)
    return float(values.mean())


# -- initialization ---------------------------------------------------------


def init_cold(dims: tuple[int, int, int], seed: int) -> MlpModel:
    """Glorot-uniform weights and zero biases."""
    d, h, m = dims
    rng = np.random.default_rng(seed)
    model = MlpModel(d, h, m, np.zeros(MlpModel.param_count(d, h, m)))
    w1, _, w2, _ = model.unpack()
    w1[...] = rng.uniform(-1.0, 1.0, size=w1.shape) * np.sqrt(6.0 / (d + h))
    w2[...] = rng.uniform(-1.0, 1.0, size=w2.shape) * np.sqrt(6.0 / (h + m))
    return model


def init_warm(base: MlpModel) -> MlpModel:
    return base.copy()


def init_shrink_perturb(base: MlpModel, alpha: float, seed: int, fresh: MlpModel | None = None) -> MlpModel:
    """``alpha * theta_base + (1 - alpha) * theta_fresh``; ``fresh`` defaults to ``init_cold(seed)``."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("shrink-perturb alpha must lie in [0, 1]")
    if fresh is None:
        fresh = init_cold(base.dims, seed)
    elif fresh.dims != base.dims:
        raise ValueError(f"shape mismatch: {base.dims} vs {fresh.dims}")
    if alpha == 1.0:
        return base.copy()
    if alpha == 0.0:
        return fresh.copy()
    return MlpModel(*base.dims, params=alpha * base.params + (1.0 - alpha) * fresh.params)


# -- optimization -----------------------------------------------------------


@dataclass
class TrainConfig:
    max_epochs: int = 100
    batch_size: int = 32
    patience: int = 5
    adam_lr: float = 1e-3
    adam_beta1: float = 0.9
    adam_beta2: float = 0.999
    adam_eps: float = 1e-7
    seed: int = 0

    def __post_init__(self):
        if self.max_epochs < 0:
            raise ValueError("max_epochs must be non-negative")
        if self.batch_size < 1:
            raise ValueError("batch_size must be positive")
        if self.patience < 1:
            raise ValueError("patience must be at least 1")
        if not self.adam_lr > 0:
            raise ValueError("learning rate must be positive")


class Adam:
    def __init__(self, size: int, cfg: TrainConfig):
        self.lr = cfg.adam_lr
        self.beta1 = cfg.adam_beta1
        self.beta2 = cfg.adam_beta2
        self.eps = cfg.adam_eps
        self.m = np.zeros(size)
        self.v = np.zeros(size)
        self.t = 0

    def step(self, params: np.ndarray, grad: np.ndarray) -> None:
        self.t += 1
        self.m = self.beta1 * self.m + (1.0 - self.beta1) * grad
        self.v = self.beta2 * self.v + (1.0 - self.beta2) * grad * grad
        m_hat = self.m / (1.0 - self.beta1**self.t)
        v_hat = self.v / (1.0 - self.beta2**self.t)
        params -= self.lr * m_hat / (np.sqrt(v_hat) + self.eps)


def epoch_permutation(n: int, seed: int, epoch: int) -> np.ndarray:
    return np.random.default_rng([seed, epoch]).permutation(n)


def minibatches(batch: SoftTargetBatch, batch_size: int, seed: int, epoch: int) -> Iterator[tuple[np.ndarray, np.ndarray]]:
    order = epoch_permutation(len(batch), seed, epoch)
    for start in range(0, len(batch), batch_size):
        idx = order[start : start + batch_size]
        yield batch.features[idx], batch.targets[idx]


class EarlyStopping:
    """Tracks the best validation loss and says when patience has run out."""

    def __init__(self, patience: int):
        self.patience = patience
        self.best = np.inf
        self.best_epoch = -1
        self.best_params: np.ndarray | None = None
        self.wait = 0

    def update(self, epoch: int, loss: float, params: np.ndarray) -> bool:
        """Record an epoch; returns True when training should stop."""
        if loss < self.best:
            self.best = loss
            self.best_epoch = epoch
            self.best_params = params.copy()
            self.wait = 0
            return False
        self.wait += 1
        return self.wait >= self.patience


BatchSource = Callable[[int], Iterable[tuple[np.ndarray, np.ndarray]]]


def train(
    model_init: MlpModel,
    train_batch: SoftTargetBatch,
    validation: SoftTargetBatch,
    config: TrainConfig,
    phi: ScoringFunction,
    history: list | None = None,
    batch_source: BatchSource | None = None,
) -> MlpModel:
    """Adam over shuffled mini-batches with early stopping on validation loss.

    Returns the parameters of the best validation epoch.  ``batch_source``
    replaces the default per-epoch shuffling (used for mixup streams).
    ``history`` receives one validation loss per completed epoch.
    """
    if len(validation) == 0:
        raise ValueError("validation set is empty")
    model = model_init.copy()
    if config.max_epochs == 0:
        return model
    if batch_source is None:

        def batch_source(epoch):
            return minibatches(train_batch, config.batch_size, config.seed, epoch)

    opt = Adam(model.params.size, config)
    stopper = EarlyStopping(config.patience)
    for epoch in range(config.max_epochs):
        for xb, tb in batch_source(epoch):
            _, grad = _loss_and_gradient(model, xb, tb, phi)
            opt.step(model.params, grad)
        val = mean_loss(model, validation, phi)
        if history is not None:
            history.append(val)
        if stopper.update(epoch, val, model.params):
            break
    model.params = stopper.best_params
    return model


# -- checkpoints ------------------------------------------------------------


def model_to_dict(model: MlpModel) -> dict:
    raw = model.params.astype("<f8").tobytes()
    return {
        "format": "lowchurn-mlp",
        "version": CHECKPOINT_VERSION,
        "input_dim": model.input_dim,
        "hidden_dim": model.hidden_dim,
        "num_classes": model.num_classes,
        "params_f64le_b64": base64.b64encode(raw).decode("ascii"),
    }


def model_from_dict(doc: dict) -> MlpModel:
    if doc.get("format") != "lowchurn-mlp":
        raise ValueError("not a model checkpoint")
    if doc.get("version") != CHECKPOINT_VERSION:
        raise ValueError(f"unsupported checkpoint version {doc.get('version')}")
    params = np.frombuffer(base64.b64decode(doc["params_f64le_b64"]), dtype="<f8").astype(np.float64)
    return MlpModel(doc["input_dim"], doc["hidden_dim"], doc["num_classes"], params)


def save_model(model: MlpModel, path) -> None:
    Path(path).write_text(json.dumps(model_to_dict(model), indent=1) + "\n")


def load_model(path) -> MlpModel:
    return model_from_dict(json.loads(Path(path).read_text()))
