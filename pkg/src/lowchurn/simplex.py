"""Simplex arithmetic, strictly proper scoring rules and the risk/churn estimators.

Prediction sets are handled as ``(n, m)`` float64 arrays whose rows lie on the
probability simplex.  :class:`ProbabilityVector` is the validated single-point
type; the batch functions accept anything array-like and validate shape only.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field

import numpy as np

SUM_TOLERANCE = 1e-9
RENORMALIZE_LIMIT = 1e-6


class ScoringKind(str, enum.Enum):
    CROSS_ENTROPY = "cross_entropy"
    BRIER = "brier"


@dataclass(frozen=True)
class ProbabilityVector:
    """A point on the (m-1)-simplex.

    Inputs whose sum is within ``1e-6`` of one are renormalized; anything
    further off raises ``ValueError``.
    """

    values: np.ndarray = field(repr=False)

    def __init__(self, values):
        arr = np.array(values, dtype=np.float64).reshape(-1)
        if arr.size < 2:
            raise ValueError("a probability vector needs at least 2 entries")
        if not np.all(np.isfinite(arr)):
            raise ValueError("probability vector has non-finite entries")
        if np.any(arr < 0.0):
            raise ValueError(f"negative probability in {arr}")
        total = arr.sum()
        if abs(total - 1.0) > RENORMALIZE_LIMIT:
            raise ValueError(f"entries sum to {total!r}, not 1")
        arr = arr / total
        arr.setflags(write=False)
        object.__setattr__(self, "values", arr)

    @classmethod
    def one_hot(cls, y: int, m: int) -> "ProbabilityVector":
        e = np.zeros(m)
        e[y] = 1.0
        return cls(e)

    @classmethod
    def uniform(cls, m: int) -> "ProbabilityVector":
        return cls(np.full(m, 1.0 / m))

    @property
    def m(self) -> int:
        return self.values.size

    def __array__(self, dtype=None, copy=None):
        return self.values if dtype is None else self.values.astype(dtype)

    def __len__(self) -> int:
        return self.values.size

    def __repr__(self) -> str:
        return f"ProbabilityVector({np.array2string(self.values, precision=6)})"


@dataclass(frozen=True)
class ScoringFunction:
    """Strictly proper scoring rule ``phi: simplex -> R_+^m``.

    ``scores(v)[..., y]`` is the loss of predicting ``v`` when the label is
    ``y``.  Cross-entropy clips probabilities at ``clip_floor`` so every
    score stays below ``bound``.
    """

    kind: ScoringKind = ScoringKind.CROSS_ENTROPY
    clip_floor: float = 1e-12

    def __post_init__(self):
        object.__setattr__(self, "kind", ScoringKind(self.kind))
        if not self.clip_floor > 0.0:
            raise ValueError("clip_floor must be positive")

    @classmethod
    def cross_entropy(cls, clip_floor: float = 1e-12) -> "ScoringFunction":
        return cls(ScoringKind.CROSS_ENTROPY, clip_floor)

    @classmethod
    def brier(cls) -> "ScoringFunction":
        return cls(ScoringKind.BRIER)

    @property
    def bound(self) -> float:
        """Sup-norm bound ``B`` on the scores over the simplex."""
        if self.kind is ScoringKind.CROSS_ENTROPY:
            return float(-np.log(self.clip_floor))
        return 2.0

    @property
    def lipschitz(self) -> float:
        """Default L1-Lipschitz constant used by the risk/churn bound."""
        if self.kind is ScoringKind.CROSS_ENTROPY:
            return 1.0 / self.clip_floor
        return 4.0

    @property
    def strong_concavity(self) -> tuple[float, int]:
        """``(alpha, q)``: ``u . phi(u)`` is alpha-strongly concave in the L_q norm."""
        if self.kind is ScoringKind.CROSS_ENTROPY:
            return 1.0, 1
        return 2.0, 2

    def scores(self, v) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if self.kind is ScoringKind.CROSS_ENTROPY:
            return -np.log(np.maximum(v, self.clip_floor))
        # ||e_y - v||^2 = 1 - 2 v_y + ||v||^2
        sq = np.sum(v * v, axis=-1, keepdims=True)
        return 1.0 - 2.0 * v + sq

    def weighted(self, weights, v) -> np.ndarray:
        """Row-wise ``weights . phi(v)``."""
        weights = np.asarray(weights, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if self.kind is ScoringKind.CROSS_ENTROPY:
            # skip zero weights so 0 * log(floor) never contributes
            logs = np.log(np.maximum(v, self.clip_floor))
            return -np.sum(np.where(weights != 0.0, weights * logs, 0.0), axis=-1)
        return np.sum(weights * self.scores(v), axis=-1)

    def weighted_grad(self, weights, v) -> np.ndarray:
        """Gradient of ``weights . phi(v)`` with respect to ``v`` (row-wise)."""
        weights = np.asarray(weights, dtype=np.float64)
        v = np.asarray(v, dtype=np.float64)
        if self.kind is ScoringKind.CROSS_ENTROPY:
            live = v > self.clip_floor
            safe = np.where(live, v, 1.0)
            return np.where(live, -weights / safe, 0.0)
        total = np.sum(weights, axis=-1, keepdims=True)
        return 2.0 * (total * v - weights)

    def softmax_backward(self, weights, probs) -> np.ndarray:
        """Gradient of ``weights . phi(softmax(z))`` with respect to the logits ``z``."""
        weights = np.asarray(weights, dtype=np.float64)
        probs = np.asarray(probs, dtype=np.float64)
        if self.kind is ScoringKind.CROSS_ENTROPY:
            # p * d/dp = -w on unclipped coordinates; avoids dividing by tiny p
            pg = np.where(probs > self.clip_floor, -weights, 0.0)
        else:
            pg = probs * self.weighted_grad(weights, probs)
        return pg - probs * np.sum(pg, axis=-1, keepdims=True)


def as_prediction_matrix(predictions, m: int | None = None) -> np.ndarray:
    """Stack predictions (vectors or an array) into an ``(n, m)`` float64 array."""
    if isinstance(predictions, np.ndarray):
        arr = np.asarray(predictions, dtype=np.float64)
    else:
        arr = np.array([np.asarray(p, dtype=np.float64) for p in predictions], dtype=np.float64)
    if arr.ndim == 1:
        arr = arr[None, :]
    if arr.ndim != 2:
        raise ValueError(f"expected a 2-d prediction array, got shape {arr.shape}")
    if m is not None and arr.shape[1] != m:
        raise ValueError(f"dimension mismatch: expected {m} classes, got {arr.shape[1]}")
    return arr


def one_hot(labels, m: int) -> np.ndarray:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if labels.size and (labels.min() < 0 or labels.max() >= m):
        raise ValueError(f"labels must lie in [0, {m})")
    out = np.zeros((labels.size, m))
    out[np.arange(labels.size), labels] = 1.0
    return out


def _check_nonempty_pair(a: np.ndarray, b: np.ndarray) -> None:
    if a.shape[0] == 0:
        raise ValueError("empty sample")
    if a.shape != b.shape:
        raise ValueError(f"dimension mismatch: {a.shape} vs {b.shape}")


def loss_phi(phi: ScoringFunction, y: int, h) -> float:
    h = np.asarray(h, dtype=np.float64).reshape(-1)
    if not 0 <= y < h.size:
        raise ValueError(f"label {y} out of range for {h.size} classes")
    return float(phi.scores(h)[y])


def divergence_phi(phi: ScoringFunction, u, v) -> float:
    """``d(u, v) = sum_y u_y (phi_y(v) - phi_y(u))``."""
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    v = np.asarray(v, dtype=np.float64).reshape(-1)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.size} vs {v.size}")
    return float(phi.weighted(u, v) - phi.weighted(u, u))


def divergences(phi: ScoringFunction, u, v) -> np.ndarray:
    """Row-wise divergence between two ``(n, m)`` arrays."""
    u = as_prediction_matrix(u)
    v = as_prediction_matrix(v)
    if u.shape != v.shape:
        raise ValueError(f"dimension mismatch: {u.shape} vs {v.shape}")
    return phi.weighted(u, v) - phi.weighted(u, u)


def losses(phi: ScoringFunction, h_predictions, labels) -> np.ndarray:
    h = as_prediction_matrix(h_predictions)
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    if h.shape[0] != labels.size:
        raise ValueError(f"{h.shape[0]} predictions but {labels.size} labels")
    if labels.size == 0:
        raise ValueError("empty sample")
    if labels.min() < 0 or labels.max() >= h.shape[1]:
        raise ValueError("label out of range")
    return phi.scores(h)[np.arange(labels.size), labels]


def empirical_risk(phi: ScoringFunction, h_predictions, labels) -> float:
    return float(np.mean(losses(phi, h_predictions, labels)))


def empirical_churn(phi: ScoringFunction, base_predictions, h_predictions) -> float:
    g = as_prediction_matrix(base_predictions)
    h = as_prediction_matrix(h_predictions)
    _check_nonempty_pair(g, h)
    return float(np.mean(divergences(phi, g, h)))


def hard_argmax(predictions) -> np.ndarray:
    """Row-wise argmax with ties going to the larger class index."""
    p = as_prediction_matrix(predictions)
    m = p.shape[1]
    return m - 1 - np.argmax(p[:, ::-1], axis=1)


def hard_churn(base_predictions, h_predictions) -> float:
    g = as_prediction_matrix(base_predictions)
    h = as_prediction_matrix(h_predictions)
    _check_nonempty_pair(g, h)
    return float(np.mean(hard_argmax(g) != hard_argmax(h)))


def accuracy(predictions, labels) -> float:
    labels = np.asarray(labels, dtype=np.int64).reshape(-1)
    return float(np.mean(hard_argmax(predictions) == labels))


def empirical_loss_variance(phi: ScoringFunction, h_predictions, labels) -> float:
    values = losses(phi, h_predictions, labels)
    if values.size < 2:
        raise ValueError("variance needs at least 2 examples")
    return float(np.var(values, ddof=1))
