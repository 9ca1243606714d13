"""Loss functions over softmax outputs, with gradients w.r.t. the logits."""

from __future__ import annotations

import numpy as np

CLIP = 1e-7
LOSS_KINDS = ("bce", "ce")


def softmax(logits: np.ndarray) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def one_hot(targets, n_classes: int) -> np.ndarray:
    targets = np.asarray(targets, dtype=np.int64)
    out = np.zeros(targets.shape + (n_classes,))
    np.put_along_axis(out, targets[..., None], 1.0, axis=-1)
    return out


def bce(probs: np.ndarray, targets) -> np.ndarray:
    """Per-sample binary cross-entropy averaged over the class outputs."""
    p = np.clip(np.asarray(probs, dtype=np.float64), CLIP, 1 - CLIP)
    y = one_hot(targets, p.shape[-1])
    return -np.mean(y * np.log(p) + (1 - y) * np.log(1 - p), axis=-1)


def cross_entropy(probs: np.ndarray, targets) -> np.ndarray:
    p = np.clip(np.asarray(probs, dtype=np.float64), CLIP, 1 - CLIP)
    y = one_hot(targets, p.shape[-1])
    return -np.sum(y * np.log(p), axis=-1)


def loss_value(probs, targets, kind: str = "bce") -> float:
    """Batch-mean loss."""
    per = bce(probs, targets) if kind == "bce" else cross_entropy(probs, targets)
    return float(np.mean(per))


def loss_grad_logits(probs: np.ndarray, targets, kind: str = "bce") -> np.ndarray:
    """Gradient of the batch-mean loss w.r.t. the logits that produced ``probs``.

    Probabilities pinned by the clip contribute no gradient.
    """
    if kind not in LOSS_KINDS:
        raise ValueError(f"unknown loss kind {kind!r}")
    p_raw = np.asarray(probs, dtype=np.float64)
    n, k = p_raw.shape
    p = np.clip(p_raw, CLIP, 1 - CLIP)
    live = (p_raw >= CLIP) & (p_raw <= 1 - CLIP)
    y = one_hot(targets, k)
    if kind == "bce":
        dp = -(y / p - (1 - y) / (1 - p)) / k
    else:
        dp = -y / p
    dp = dp * live / n
    # softmax Jacobian-vector product
    return p_raw * (dp - np.sum(dp * p_raw, axis=1, keepdims=True))
