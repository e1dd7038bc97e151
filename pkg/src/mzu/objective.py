"""Task losses and the disagreement-regularized training objective.

The regularizer rewards zone diversity: each generated zone set
contributes its negative mean pairwise cosine, summed over every
transform invocation and token. Because that sum is itself negative,
the minimized loss is ``task - lambda * disagreement_sum`` (more
diverse zones lower the loss when lambda > 0).
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import DataError, ShapeError
from .numerics import Tensor, constant
from .numerics import ops

LN2 = math.log(2.0)
ASPECT_LABELS = ("positive", "negative", "neutral", "conflict")


def lm_loss(logits: Tensor, targets: np.ndarray) -> Tensor:
    """Mean next-symbol cross-entropy in nats per character."""
    targets = np.asarray(targets)
    if logits.shape[:-1] != targets.shape:
        raise ShapeError(
            f"lm_loss: logits {logits.shape} do not align with targets {targets.shape}")
    return ops.cross_entropy_from_logits(logits, targets)


def bpc(nats_per_char: float) -> float:
    """Bits per character: nats divided by ln 2."""
    value = nats_per_char.item() if isinstance(nats_per_char, Tensor) else float(nats_per_char)
    return value / LN2


def disagreement_total(terms: Sequence[Tensor]) -> Optional[Tensor]:
    """Sum per-sample disagreement tensors over tokens, transforms, and batch."""
    if not terms:
        return None
    total = ops.reduce_sum(terms[0])
    for term in terms[1:]:
        total = ops.add(total, ops.reduce_sum(term))
    return total


def combined_objective(task_loss: Tensor, disagreement_sum: Optional[Tensor],
                       lam: float) -> Tensor:
    """Minimized objective: task loss minus lambda times the disagreement sum."""
    if disagreement_sum is None or lam == 0.0:
        return task_loss
    return ops.sub(task_loss, ops.scale(disagreement_sum, lam))


@dataclass
class LossBreakdown:
    """Scalar summary of one training step's objective."""

    task_loss: float
    disagreement_sum: float
    lam: float

    @property
    def combined(self) -> float:
        return self.task_loss - self.lam * self.disagreement_sum


def pool_states(states: Sequence[Tensor]) -> Tensor:
    """Mean over a sequence of (1, width) states -> (1, width)."""
    if not states:
        raise DataError("pool_states: empty state sequence")
    stacked = ops.concat(list(states), axis=0)
    return ops.reduce_mean(stacked, axis=0, keepdims=True)


def aspect_logits(states: Sequence[Tensor], aspect_vec: Tensor,
                  head_weight: Tensor, head_bias: Tensor) -> Tensor:
    """Mean-pool the encoder states, append the aspect vector, one affine map."""
    pooled = pool_states(states)
    joined = ops.concat([pooled, aspect_vec], axis=-1)
    return ops.add(ops.matmul(joined, head_weight), head_bias)


def classify_aspect(states: Sequence[Tensor], aspect_vec: Tensor,
                    head_weight: Tensor, head_bias: Tensor) -> Tensor:
    """Distribution over the four sentiment labels."""
    return ops.softmax_rows(aspect_logits(states, aspect_vec, head_weight, head_bias))
