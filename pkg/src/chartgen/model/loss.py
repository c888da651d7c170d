"""Token cross-entropy with PAD down-weighting, and the auxiliary-loss combiner."""

from __future__ import annotations

import numpy as np

from ..tokenizer import PAD


def log_softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def position_weights(targets, pad_weight: float, mask=None) -> np.ndarray:
    """1 for note/boundary targets, ``pad_weight`` for PAD, 0 where ``mask`` is 0."""
    targets = np.asarray(targets)
    w = np.where(targets == PAD, pad_weight, 1.0)
    if mask is not None:
        w = w * np.asarray(mask, dtype=np.float64)
    return w


def token_loss(logits, targets, pad_weight: float = 1.0, mask=None):
    """Weighted mean cross-entropy and the per-position losses.

    The mean is ``sum(w * l) / sum(w)`` with PAD targets weighted by
    ``pad_weight``. Computed in float64 whatever the logits dtype.
    """
    if not 0.0 < pad_weight <= 1.0:
        raise ValueError("pad_weight must lie in (0, 1]")
    logp = log_softmax(logits)
    targets = np.asarray(targets)
    per_pos = -np.take_along_axis(logp, targets[..., None], axis=-1)[..., 0]
    w = position_weights(targets, pad_weight, mask)
    total = w.sum()
    loss = float((w * per_pos).sum() / total) if total > 0 else 0.0
    return loss, per_pos


def token_loss_grad(logits, targets, pad_weight: float = 1.0, mask=None):
    """``(loss, dloss/dlogits)`` for :func:`token_loss`."""
    loss, _ = token_loss(logits, targets, pad_weight, mask)
    targets = np.asarray(targets)
    w = position_weights(targets, pad_weight, mask)
    total = w.sum()
    probs = np.exp(log_softmax(logits))
    np.put_along_axis(probs, targets[..., None], np.take_along_axis(probs, targets[..., None], axis=-1) - 1.0, axis=-1)
    scale = w / total if total > 0 else w * 0.0
    return loss, probs * scale[..., None]


def combine_losses(token: float, aux=()) -> float:
    """``token + sum(lambda_i * L_i)`` over ``(lambda_i, L_i)`` pairs."""
    total = token
    for weight, value in aux:
        if weight < 0:
            raise ValueError("auxiliary weights must be non-negative")
        total = total + weight * value
    return total
