"""Differentiable segmentation losses and their weighted combination."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import autograd as ag
from .autograd import DimensionError, Tensor

BCE_CLAMP = 1e-7


@dataclass(frozen=True)
class LossConfig:
    w_dice: float = 5.0
    w_bce: float = 2.0
    w_mse: float = 2.0
    eps: float = 1e-6

    def __post_init__(self):
        if min(self.w_dice, self.w_bce, self.w_mse) <= 0:
            raise ValueError("loss weights must be positive")


def _pair(pred, truth):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    t = truth.data if isinstance(truth, Tensor) else np.asarray(truth)
    if pred.shape != t.shape:
        raise DimensionError(f"prediction {pred.shape} and truth {t.shape} differ")
    return pred, Tensor(t, dtype=pred.dtype)


def dice_loss(pred, truth, eps: float = 1e-6) -> Tensor:
    """``1 - (2 sum(p t) + eps) / (sum p + sum t + eps)``."""
    p, t = _pair(pred, truth)
    inter = ag.sum(ag.mul(p, t))
    denom = ag.add(ag.add(ag.sum(p), ag.sum(t)), eps)
    return ag.sub(1.0, ag.div(ag.add(ag.mul(inter, 2.0), eps), denom))


def bce_loss(pred, truth) -> Tensor:
    """Mean binary cross-entropy with probabilities clamped to [1e-7, 1 - 1e-7]."""
    p, t = _pair(pred, truth)
    p = ag.clip(p, BCE_CLAMP, 1.0 - BCE_CLAMP)
    pos = ag.mul(t, ag.log(p))
    negs = ag.mul(ag.sub(1.0, t), ag.log(ag.sub(1.0, p)))
    return ag.neg(ag.mean(ag.add(pos, negs)))


def mse_loss(pred, truth) -> Tensor:
    p, t = _pair(pred, truth)
    d = ag.sub(p, t)
    return ag.mean(ag.mul(d, d))


def combined_loss(pred, truth, cfg: LossConfig = LossConfig()):
    """Weighted sum of Dice, BCE and MSE; returns ``(total, components)``."""
    d = dice_loss(pred, truth, cfg.eps)
    b = bce_loss(pred, truth)
    m = mse_loss(pred, truth)
    total = ag.add(ag.add(ag.mul(d, cfg.w_dice), ag.mul(b, cfg.w_bce)), ag.mul(m, cfg.w_mse))
    return total, {"dice": d.item(), "bce": b.item(), "mse": m.item()}


def weighted_total(components: dict, cfg: LossConfig = LossConfig()) -> float:
    return cfg.w_dice * components["dice"] + cfg.w_bce * components["bce"] + cfg.w_mse * components["mse"]
