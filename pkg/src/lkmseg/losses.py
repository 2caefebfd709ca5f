"""Training loss: soft Dice plus cross-entropy over per-pixel logits."""

from __future__ import annotations

import numpy as np

from . import tensor as T
from .errors import ShapeError
from .tensor import Tensor


def log_softmax(logits: Tensor, axis: int) -> Tensor:
    shift = T.reduce_max(logits, axes=axis, keepdims=True).detach()
    z = T.sub(logits, shift)
    lse = T.log(T.reduce_sum(T.exp(z), axes=axis, keepdims=True))
    return T.sub(z, lse)


def seg_loss(logits: Tensor, gt_mask: np.ndarray, eps: float = 1e-6) -> Tensor:
    """Soft Dice + cross-entropy; logits [B, K, H, W] or [K, H, W]."""
    if not isinstance(logits, Tensor):
        logits = T.tensor(logits)
    squeeze = logits.ndim == 3
    if squeeze:
        logits = T.reshape(logits, (1,) + logits.shape)
        gt_mask = np.asarray(gt_mask)[None]
    gt_mask = np.asarray(gt_mask)
    B, K = logits.shape[0], logits.shape[1]
    if gt_mask.shape != (B,) + logits.shape[2:]:
        raise ShapeError(f"mask shape {gt_mask.shape} inconsistent with "
                         f"logits {logits.shape}")

    onehot = np.zeros(logits.shape, dtype=logits.data.dtype)
    b_idx = np.arange(B)[:, None, None]
    h_idx = np.arange(logits.shape[2])[None, :, None]
    w_idx = np.arange(logits.shape[3])[None, None, :]
    onehot[b_idx, gt_mask, h_idx, w_idx] = 1.0

    logp = log_softmax(logits, axis=1)
    ce = T.neg(T.reduce_mean(T.reduce_sum(T.mul(logp, onehot), axes=1)))

    probs = T.exp(logp)
    inter = T.reduce_sum(T.mul(probs, onehot), axes=(0, 2, 3))
    sums = T.add(T.reduce_sum(probs, axes=(0, 2, 3)),
                 T.reduce_sum(T.tensor(onehot), axes=(0, 2, 3)))
    dice = T.div(T.scale(inter, 2.0), T.add(sums, eps))
    dice_loss = T.sub(1.0, T.reduce_mean(dice))
    return T.add(ce, dice_loss)
