"""Bidirectional InfoNCE between predicted and target embeddings."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError, DimensionError
from .tensor import (
    Tensor,
    add,
    l2_normalize,
    log_softmax_along,
    matmul,
    mul,
    neg,
    power,
    reshape,
    scale,
    sum_along,
    swap_last,
)


@dataclass(frozen=True)
class ContrastiveConfig:
    temperature: float = 0.07

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError("temperature must be positive")


def flatten_normalize(x: Tensor) -> Tensor:
    """``[B, tokens, c]`` -> ``[B, tokens*c]`` rows of unit length."""
    return l2_normalize(reshape(x, (x.shape[0], x.size // x.shape[0])), axis=-1)


def similarity_logits(pred: Tensor, target: Tensor, temperature) -> Tensor:
    """``logits[i, j] = <pred_i, target_j> / temperature`` on normalised rows.

    ``temperature`` may be a float or a scalar :class:`Tensor`, in which
    case the loss is differentiable with respect to it.
    """
    sims = matmul(flatten_normalize(pred), swap_last(flatten_normalize(target)))
    if isinstance(temperature, Tensor):
        return mul(sims, power(temperature, -1.0))
    if temperature <= 0:
        raise ConfigError("temperature must be positive")
    return scale(sims, 1.0 / temperature)


def infonce_from_logits(logits: Tensor) -> Tensor:
    """Mean over the batch of row-wise plus column-wise cross entropy on the diagonal."""
    n = logits.shape[0]
    if logits.shape != (n, n):
        raise DimensionError(f"expected a square logit matrix, got {logits.shape}")
    eye = Tensor(np.eye(n))
    pred_to_target = sum_along(mul(log_softmax_along(logits, axis=1), eye))
    target_to_pred = sum_along(mul(log_softmax_along(logits, axis=0), eye))
    return scale(neg(add(pred_to_target, target_to_pred)), 1.0 / n)


def bidirectional_infonce(pred: Tensor, target: Tensor, cfg: ContrastiveConfig | float | Tensor = 0.07) -> Tensor:
    """In-batch bidirectional contrastive loss.

    For sample n, the positive is target n and the other batch entries are
    negatives, once with prediction n as the anchor and once with target n
    as the anchor. Returns the batch mean of the two terms' sum.
    """
    if pred.shape != target.shape:
        raise DimensionError(f"prediction {pred.shape} and target {target.shape} differ")
    tau = cfg.temperature if isinstance(cfg, ContrastiveConfig) else cfg
    return infonce_from_logits(similarity_logits(pred, target, tau))


def total_loss(pred_image: Tensor, image: Tensor, pred_text: Tensor, text: Tensor, temperature) -> Tensor:
    """Image term plus text term, equally weighted."""
    return add(
        bidirectional_infonce(pred_image, image, temperature),
        bidirectional_infonce(pred_text, text, temperature),
    )

