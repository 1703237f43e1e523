"""Margin-adjusted training objective and exact gradients.

The adjusted probability for a sample labeled y shifts every class logit by
a noise-aware term (delta times the y-th transition-matrix row) and a
balance term (t times the log class prior), rescales by 1/s, and applies a
softmax:

    p_hat_j = softmax_j( (z_j + delta * M[y, j] + t * log pi_j) / s )

The training loss is the focal loss evaluated at the labeled entry,
(1 - p_hat_y)^gamma * (-log p_hat_y), averaged over the batch. Gradients
with respect to the logits are analytic, with the modulating factor treated
as a function of p_hat (full chain rule, pinned by finite-difference tests).

All reductions run in float64; batch means use compensated summation so
repeated runs are bit-identical.
"""

import math
from dataclasses import dataclass

import numpy as np

from .errors import ValidationError
from .priors import ClassPrior, TransitionMatrix


@dataclass(frozen=True)
class MarginConfig:
    """Weights of the margin terms: delta (noise-aware), t (balance),
    s (temperature), gamma (focal exponent)."""

    delta: float = 0.5
    t: float = 1.0
    s: float = 1.0
    gamma: float = 1.0

    def __post_init__(self):
        if not self.s > 0:
            raise ValidationError("s must be positive")
        if self.delta < 0 or self.t < 0 or self.gamma < 0:
            raise ValidationError("delta, t and gamma must be nonnegative")


# Defaults that worked well for a re-trained linear head; deeper backbones
# favor a smaller temperature and weaker margins.
PRESET_LINEAR_HEAD = MarginConfig(delta=0.5, t=1.0, s=1.0, gamma=1.0)
PRESET_DEEP_BACKBONE = MarginConfig(delta=0.1, t=0.01, s=0.1, gamma=1.0)


@dataclass(frozen=True)
class LossBatch:
    """Per-sample losses, adjusted label probabilities, and logit gradients
    for one mini-batch."""

    logits: np.ndarray
    labels: np.ndarray
    per_sample_loss: np.ndarray
    grad_logits: np.ndarray
    nabm_prob: np.ndarray

    @property
    def mean_loss(self) -> float:
        return math.fsum(self.per_sample_loss.tolist()) / self.per_sample_loss.size


def _logsumexp_rows(a: np.ndarray) -> np.ndarray:
    m = a.max(axis=1, keepdims=True)
    return m[:, 0] + np.log(np.exp(a - m).sum(axis=1))


def _check_logits(logits: np.ndarray, name: str = "logits") -> np.ndarray:
    logits = np.asarray(logits, dtype=np.float64)
    if not np.all(np.isfinite(logits)):
        raise ValidationError(f"non-finite {name}")
    return logits


def _adjusted_log_probs(
    logits: np.ndarray,
    labels: np.ndarray,
    matrix: TransitionMatrix,
    prior: ClassPrior,
    cfg: MarginConfig,
) -> np.ndarray:
    """Log-softmax of the margin-adjusted logits, one row per sample."""
    adjusted = (logits + cfg.delta * matrix.values[labels] + cfg.t * np.log(prior.values)) / cfg.s
    return adjusted - _logsumexp_rows(adjusted)[:, None]


def nabm_probability(
    logits: np.ndarray,
    label: int,
    matrix: TransitionMatrix,
    prior: ClassPrior,
    cfg: MarginConfig,
) -> np.ndarray:
    """Margin-adjusted probability vector for a single sample; the entry at
    ``label`` is the quantity the focal loss acts on."""
    logits = _check_logits(logits)
    if logits.ndim != 1:
        raise ValidationError("logits must be a 1-D vector")
    c = logits.shape[0]
    if matrix.num_classes != c or prior.values.size != c:
        raise ValidationError("transition matrix / prior dimensions do not match logits")
    if not 0 <= label < c:
        raise ValidationError("label out of range")
    log_probs = _adjusted_log_probs(logits[None, :], np.array([label]), matrix, prior, cfg)
    return np.exp(log_probs[0])


def cross_entropy(logits: np.ndarray, label: int) -> float:
    """Plain softmax cross-entropy, computed through log-sum-exp."""
    logits = _check_logits(logits)
    if logits.ndim != 1:
        raise ValidationError("logits must be a 1-D vector")
    if not 0 <= label < logits.shape[0]:
        raise ValidationError("label out of range")
    return float(_logsumexp_rows(logits[None, :])[0] - logits[label])


def focal_loss(prob_at_label: float, gamma: float) -> float:
    """(1 - p)^gamma * (-log p) for p in (0, 1]."""
    if gamma < 0:
        raise ValidationError("gamma must be nonnegative")
    if not prob_at_label > 0.0:
        raise ValidationError(
            f"probability {prob_at_label!r} is not positive; upstream numerics failed"
        )
    if prob_at_label > 1.0:
        raise ValidationError(f"probability {prob_at_label!r} exceeds 1")
    return float((1.0 - prob_at_label) ** gamma * -np.log(prob_at_label))


def nabm_loss_batch(
    logits: np.ndarray,
    labels: np.ndarray,
    matrix: TransitionMatrix,
    prior: ClassPrior,
    cfg: MarginConfig,
) -> LossBatch:
    """Focal loss over margin-adjusted probabilities for a batch, with
    analytic logit gradients.

    Writing p for the adjusted softmax row, y for the label and g for
    p_y * dloss/dp_y, the gradient is g * (onehot_y - p) / s with

        g = gamma * (1 - p_y)^(gamma - 1) * p_y * log(p_y) - (1 - p_y)^gamma
    """
    logits = _check_logits(logits)
    if logits.ndim != 2:
        raise ValidationError("batch logits must be a 2-D array")
    labels = np.asarray(labels, dtype=np.int64)
    b, c = logits.shape
    if b == 0:
        raise ValidationError("empty batch")
    if labels.shape != (b,):
        raise ValidationError("labels length must equal the batch size")
    if labels.min() < 0 or labels.max() >= c:
        raise ValidationError("label out of range")
    if matrix.num_classes != c or prior.values.size != c:
        raise ValidationError("transition matrix / prior dimensions do not match logits")

    log_probs = _adjusted_log_probs(logits, labels, matrix, prior, cfg)
    probs = np.exp(log_probs)
    rows = np.arange(b)
    log_p_hat = log_probs[rows, labels]
    p_hat = probs[rows, labels]

    one_minus = 1.0 - p_hat
    loss = one_minus ** cfg.gamma * -log_p_hat

    if cfg.gamma == 0.0:
        scale = np.full(b, -1.0)
    else:
        # (1-p)^(gamma-1) blows up at p=1 for gamma<1, but its product with
        # log(p) -> 0 there; evaluate only where 1-p > 0.
        scale = -(one_minus ** cfg.gamma)
        positive = one_minus > 0.0
        scale[positive] += (
            cfg.gamma
            * one_minus[positive] ** (cfg.gamma - 1.0)
            * p_hat[positive]
            * log_p_hat[positive]
        )

    grad = probs.copy()
    grad[rows, labels] -= 1.0
    grad *= -scale[:, None] / cfg.s

    return LossBatch(
        logits=logits,
        labels=labels,
        per_sample_loss=loss,
        grad_logits=grad,
        nabm_prob=p_hat,
    )
