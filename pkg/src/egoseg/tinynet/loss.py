"""Class-weighted softmax cross-entropy over pixel label maps."""

from __future__ import annotations

import numpy as np

from .autograd import Var, grad_enabled


def weighted_cross_entropy(logits, labels, weights):
    """Weight-normalized mean of per-pixel weighted cross-entropy.

    loss = sum_i w[y_i] * (-log softmax(logits_i)[y_i]) / sum_i w[y_i]

    With uniform logits this equals ln(num_classes) regardless of weights.
    ``logits``: (N, K, H, W) array; ``labels``: (N, H, W) integer map;
    ``weights``: (K,). Returns (loss, dlogits).
    """
    logits = np.asarray(logits)
    labels = np.asarray(labels)
    weights = np.asarray(weights, dtype=logits.dtype)
    n, k, h, w = logits.shape
    if labels.shape != (n, h, w):
        raise ValueError(f"labels shape {labels.shape} does not match logits {logits.shape}")
    if weights.shape != (k,):
        raise ValueError(f"need one weight per class, got {weights.shape} for {k} classes")
    if (weights <= 0).any():
        raise ValueError("class weights must be positive")
    bad = (labels < 0) | (labels >= k)
    if bad.any():
        ni, yi, xi = np.argwhere(bad)[0]
        raise ValueError(
            f"label {int(labels[ni, yi, xi])} out of range [0, {k}) at "
            f"batch {int(ni)}, pixel ({int(xi)}, {int(yi)})"
        )

    shifted = logits - logits.max(axis=1, keepdims=True)
    expv = np.exp(shifted)
    denom = expv.sum(axis=1, keepdims=True)
    log_softmax = shifted - np.log(denom)

    onehot_idx = labels[:, None, :, :]
    logp_y = np.take_along_axis(log_softmax, onehot_idx, axis=1)[:, 0]
    w_y = weights[labels]
    w_sum = w_y.sum()
    loss = float(-(w_y * logp_y).sum() / w_sum)

    softmax = expv / denom
    dlogits = softmax * (w_y / w_sum)[:, None, :, :]
    np.put_along_axis(
        dlogits,
        onehot_idx,
        np.take_along_axis(dlogits, onehot_idx, axis=1) - (w_y / w_sum)[:, None, :, :],
        axis=1,
    )
    return loss, dlogits


def weighted_cross_entropy_traced(logits: Var, labels, weights):
    """Same loss reading a traced Var; returns (loss float, loss Var)."""
    loss, dlogits = weighted_cross_entropy(logits.data, labels, weights)
    out = Var(np.asarray(loss), (logits,), lambda dy: (dlogits * dy,)) if grad_enabled() else Var(
        np.asarray(loss)
    )
    return loss, out
