"""Training-target transformations for the churn-reduction baselines.

Each producer returns an ``(n, m)`` target array that ``nn.train`` consumes
through a ``SoftTargetBatch``; mixup and co-distillation also need their own
batch stream / training loop and live here too.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Iterator

import numpy as np

from .nn import (
    Adam,
    EarlyStopping,
    MlpModel,
    SoftTargetBatch,
    TrainConfig,
    _loss_and_gradient,
    epoch_permutation,
    forward,
    mean_loss,
    minibatches,
)
from .oracle import AnchorParams
from .simplex import ScoringFunction, as_prediction_matrix, hard_argmax, one_hot

DEFAULT_GRID = tuple(round(0.1 * k, 1) for k in range(1, 10))
DEFAULT_ANCHOR_ETAS = (0.5, 0.7, 1.0)


@dataclass(frozen=True)
class DistillConfig:
    lam: float

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise ValueError("lambda must lie in [0, 1]")


@dataclass(frozen=True)
class MixupConfig:
    alpha: float

    def __post_init__(self):
        if not self.alpha > 0:
            raise ValueError("mixup alpha must be positive")


@dataclass(frozen=True)
class CoDistillConfig:
    alpha: float
    warmup_steps: int = 0

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ValueError("co-distillation alpha must lie in [0, 1]")
        if self.warmup_steps < 0:
            raise ValueError("warmup_steps must be non-negative")


def _labels_and_base(labels, base_predictions):
    g = as_prediction_matrix(base_predictions)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size != g.shape[0]:
        raise ValueError(f"{labels.size} labels but {g.shape[0]} base predictions")
    return labels, g, one_hot(labels, g.shape[1])


def distilled_targets(labels, base_predictions, cfg: DistillConfig) -> np.ndarray:
    """Rows ``lam * e_y + (1 - lam) * g(x)``."""
    _, g, e = _labels_and_base(labels, base_predictions)
    if cfg.lam == 1.0:
        return e
    if cfg.lam == 0.0:
        return g.copy()
    return cfg.lam * e + (1.0 - cfg.lam) * g


def anchor_targets(labels, base_predictions, params: AnchorParams) -> np.ndarray:
    """Anchor-loss weights.

    Where the base model's tie-broken argmax equals the label the row is
    ``alpha * g + (1 - alpha) * e_y``; elsewhere it is ``eta * e_y`` and is
    deliberately left unnormalized.
    """
    labels, g, e = _labels_and_base(labels, base_predictions)
    agree = (hard_argmax(g) == labels)[:, None]
    return np.where(agree, params.alpha * g + (1.0 - params.alpha) * e, params.eta * e)


def smoothed_targets(labels, base_predictions, alpha: float) -> np.ndarray:
    """Label smoothing toward the base model's prediction."""
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("smoothing alpha must lie in [0, 1]")
    _, g, e = _labels_and_base(labels, base_predictions)
    if alpha == 0.0:
        return e
    if alpha == 1.0:
        return g.copy()
    return (1.0 - alpha) * e + alpha * g


def mix_pair(x1, t1, x2, t2, lam: float) -> tuple[np.ndarray, np.ndarray]:
    return lam * x1 + (1.0 - lam) * x2, lam * t1 + (1.0 - lam) * t2


def mixup_batch_stream(
    features, targets, cfg: MixupConfig, seed: int, batch_size: int = 32, epoch: int = 0
) -> Iterator[SoftTargetBatch]:
    """One epoch of mixup mini-batches.

    Each example is paired with the example at the same position of a second
    permutation; every mini-batch draws its own ``Beta(alpha, alpha)``
    coefficient.  The stream is a pure function of ``(seed, epoch)``.
    """
    x = np.asarray(features, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    n = x.shape[0]
    if n < 2:
        raise ValueError("mixup needs at least two examples")
    order = epoch_permutation(n, seed, epoch)
    rng = np.random.default_rng([seed, epoch, 1])
    partner = rng.permutation(n)
    for start in range(0, n, batch_size):
        a = order[start : start + batch_size]
        b = partner[start : start + batch_size]
        lam = float(rng.beta(cfg.alpha, cfg.alpha))
        xb, tb = mix_pair(x[a], t[a], x[b], t[b], lam)
        yield SoftTargetBatch(xb, tb)


def mixup_source(features, targets, cfg: MixupConfig, seed: int, batch_size: int = 32):
    """Adapter turning the mixup stream into an ``nn.train`` batch source."""

    def source(epoch: int):
        for b in mixup_batch_stream(features, targets, cfg, seed, batch_size, epoch):
            yield b.features, b.targets

    return source


def co_distill_train(
    model_a_init: MlpModel,
    model_b_init: MlpModel,
    data: SoftTargetBatch,
    validation: SoftTargetBatch,
    cfg: CoDistillConfig,
    train_cfg: TrainConfig,
    phi: ScoringFunction,
    return_both: bool = False,
):
    """Train two models that each distill toward the other's current predictions.

    Per step each model's targets are ``(1 - a) * y + a * p_other`` with the
    partner's predictions held fixed, ``a = 0`` during warmup and
    ``cfg.alpha`` after.  Early stopping watches model A.
    """
    if model_a_init.dims != model_b_init.dims:
        raise ValueError(f"shape mismatch: {model_a_init.dims} vs {model_b_init.dims}")
    a_model = model_a_init.copy()
    b_model = model_b_init.copy()
    if train_cfg.max_epochs == 0:
        return (a_model, b_model) if return_both else a_model
    opt_a = Adam(a_model.params.size, train_cfg)
    opt_b = Adam(b_model.params.size, train_cfg)
    stopper = EarlyStopping(train_cfg.patience)
    best_b = b_model.params.copy()
    step = 0
    for epoch in range(train_cfg.max_epochs):
        for xb, tb in minibatches(data, train_cfg.batch_size, train_cfg.seed, epoch):
            a = cfg.alpha if step >= cfg.warmup_steps else 0.0
            if a == 0.0:
                ta = tb_ = tb
            else:
                pa = forward(a_model, xb)
                pb = forward(b_model, xb)
                ta = (1.0 - a) * tb + a * pb
                tb_ = (1.0 - a) * tb + a * pa
            _, ga = _loss_and_gradient(a_model, xb, ta, phi)
            _, gb = _loss_and_gradient(b_model, xb, tb_, phi)
            opt_a.step(a_model.params, ga)
            opt_b.step(b_model.params, gb)
            step += 1
        val = mean_loss(a_model, validation, phi)
        improved_before = stopper.best_epoch
        stop = stopper.update(epoch, val, a_model.params)
        if stopper.best_epoch != improved_before:
            best_b = b_model.params.copy()
        if stop:
            break
    a_model.params = stopper.best_params
    b_model.params = best_b
    return (a_model, b_model) if return_both else a_model
