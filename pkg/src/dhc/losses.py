"""Class-weighted cross-entropy and soft-Dice losses.

Every loss takes raw logits of shape ``(K, ...)`` (class axis first, any
number of voxel axes) and returns the value together with the exact
gradient with respect to the logits. Weighting is normalised by the total
weight mass, so rescaling ``w`` by a positive constant changes nothing.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ClassWeights, LabelMap, softmax_array

PROB_FLOOR = 1e-12
DICE_SMOOTH = 1e-5


@dataclass
class LossResult:
    value: float
    grad_logits: np.ndarray


def _prepare(logits, target, w):
    z = np.asarray(logits, dtype=np.float64)
    t = target.data if isinstance(target, LabelMap) else np.asarray(target)
    wv = w.values if isinstance(w, ClassWeights) else np.asarray(w, dtype=np.float64)
    K = z.shape[0]
    if t.shape != z.shape[1:]:
        raise ValueError(f"shape mismatch: logits {z.shape} vs target {t.shape}")
    if wv.shape != (K,):
        raise ValueError(f"shape mismatch: {wv.size} weights for {K} classes")
    return z, t.astype(np.intp), wv


def _one_hot(t: np.ndarray, K: int) -> np.ndarray:
    return (np.arange(K).reshape((K,) + (1,) * t.ndim) == t[None]).astype(np.float64)


def weighted_cross_entropy(logits, target, w, probs=None) -> LossResult:
    """Weighted voxel mean of -log p[target].

    ``probs`` may carry ``softmax(logits)`` when the caller already has it.
    """
    z, t, wv = _prepare(logits, target, w)
    K = z.shape[0]
    p = softmax_array(z) if probs is None else probs
    wt = wv[t]
    mass = wt.sum(dtype=np.float64)
    if mass == 0:
        return LossResult(0.0, np.zeros_like(z))
    pt = np.take_along_axis(p, t[None], axis=0)[0]
    value = float((wt * -np.log(np.maximum(pt, PROB_FLOOR))).sum() / mass)
    # The floor is a constant below PROB_FLOOR, hence zero gradient there.
    live = (pt >= PROB_FLOOR) * wt / mass
    grad = (p - _one_hot(t, K)) * live[None]
    return LossResult(value, grad)


def soft_dice_loss(logits, target, w, smooth: float = DICE_SMOOTH, probs=None) -> LossResult:
    z, t, wv = _prepare(logits, target, w)
    K = z.shape[0]
    mass = wv.sum()
    if mass == 0:
        return LossResult(0.0, np.zeros_like(z))
    p = softmax_array(z) if probs is None else probs
    g = _one_hot(t, K)
    axes = tuple(range(1, z.ndim))
    inter = (p * g).sum(axis=axes)
    denom = p.sum(axis=axes) + g.sum(axis=axes) + smooth
    dice = (2.0 * inter + smooth) / denom
    value = float((wv * (1.0 - dice)).sum() / mass)

    shape = (K,) + (1,) * (z.ndim - 1)
    coef = (wv / mass).reshape(shape)
    ddice_dp = 2.0 * g / denom.reshape(shape) - ((2.0 * inter + smooth) / denom ** 2).reshape(shape)
    grad_p = -coef * ddice_dp
    # softmax Jacobian-vector product
    grad = p * (grad_p - (p * grad_p).sum(axis=0, keepdims=True))
    return LossResult(value, grad)


def unsupervised_pair_loss(logits, pseudo, w, probs=None) -> LossResult:
    """Half CE plus half soft Dice against a (detached) pseudo label."""
    if probs is None:
        probs = softmax_array(logits)
    ce = weighted_cross_entropy(logits, pseudo, w, probs=probs)
    dc = soft_dice_loss(logits, pseudo, w, probs=probs)
    return LossResult(0.5 * (ce.value + dc.value), 0.5 * (ce.grad_logits + dc.grad_logits))
