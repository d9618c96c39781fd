"""Training objectives built on the tape tensors.

All element losses are means, so the weights of the combined objective keep
their meaning when the number of points or boxes changes.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .tensor import Tensor

PROB_EPS = 1e-7


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 1.0  # fusion stage
    beta: float = 4.0  # segmentation
    chi: float = 2.0  # box stage

    def __post_init__(self):
        if min(self.alpha, self.beta, self.chi) < 0:
            raise ValueError(f"loss weights must be non-negative, got {self}")


def _target(target, shape) -> np.ndarray:
    y = np.broadcast_to(np.asarray(target, dtype=np.float64), shape)
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("classification targets must be 0 or 1")
    return y


def _p_t(prob: Tensor, y: np.ndarray) -> Tensor:
    p = T.clamp(prob, PROB_EPS, 1.0 - PROB_EPS)
    # y * p + (1 - y) * (1 - p)  ==  (2y - 1) * p + (1 - y)
    return T.add(T.mul(p, Tensor(2.0 * y - 1.0)), Tensor(1.0 - y))


def bce(prob: Tensor, target) -> Tensor:
    """Mean binary cross-entropy of probabilities against 0/1 targets."""
    y = _target(target, prob.shape)
    return T.scale(T.tmean(T.log(_p_t(prob, y))), -1.0)


def focal_loss(prob: Tensor, target, alpha_f: float = 0.25, gamma: float = 2.0) -> Tensor:
    """Mean of ``-alpha_t (1 - p_t)**gamma log(p_t)``."""
    if gamma < 0:
        raise ValueError(f"focal loss gamma must be >= 0, got {gamma}")
    y = _target(target, prob.shape)
    pt = _p_t(prob, y)
    alpha_t = Tensor(np.where(y == 1, alpha_f, 1.0 - alpha_f))
    modulating = T.power(T.affine(pt, -1.0, 1.0), gamma)
    per_elem = T.mul(T.mul(alpha_t, modulating), T.log(pt))
    return T.scale(T.tmean(per_elem), -1.0)


def smooth_l1(pred: Tensor, target, beta_s: float = 1.0) -> Tensor:
    """Mean Huber-style loss: quadratic below ``beta_s``, linear above."""
    if beta_s <= 0:
        raise ValueError(f"smooth_l1 beta must be positive, got {beta_s}")
    t = np.asarray(target.data if isinstance(target, Tensor) else target, dtype=np.float64)
    if t.shape != pred.shape:
        raise T.ShapeError(f"smooth_l1: prediction {pred.shape} vs target {t.shape}")
    d = pred.data - t
    ad = np.abs(d)
    small = ad < beta_s
    per = np.where(small, 0.5 * d * d / beta_s, ad - 0.5 * beta_s)
    n = d.size

    def backward(g):
        return (float(g) / n * np.where(small, d / beta_s, np.sign(d)),)

    return T._make(per.sum() / n, (pred,), backward, "smooth_l1")


def total_loss(l_cls1, l_reg1, l_seg, l_cls2, l_reg2, w: LossWeights = LossWeights()):
    """Weighted multi-task sum ``alpha(cls1 + reg1) + beta seg + chi(cls2 + reg2)``.

    Accepts tape tensors or plain floats; plain floats give a float back.
    """
    parts = (l_cls1, l_reg1, l_seg, l_cls2, l_reg2)
    for p in parts:
        v = p.item() if isinstance(p, Tensor) else float(p)
        if not math.isfinite(v):
            raise T.NonFiniteError("total_loss received a non-finite part")
    if not any(isinstance(p, Tensor) for p in parts):
        return w.alpha * (l_cls1 + l_reg1) + w.beta * l_seg + w.chi * (l_cls2 + l_reg2)
    t = [p if isinstance(p, Tensor) else Tensor(float(p)) for p in parts]
    fuse = T.scale(T.add(t[0], t[1]), w.alpha)
    seg = T.scale(t[2], w.beta)
    box = T.scale(T.add(t[3], t[4]), w.chi)
    return T.add(T.add(fuse, seg), box)
