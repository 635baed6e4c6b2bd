"""Tversky-family segmentation losses on soft probability maps.

Soft counts are taken from probabilities, never from thresholded labels, so
the losses stay differentiable::

    TP = sum(p * g)    FP = sum(p * (1 - g))    FN = sum((1 - p) * g)
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .tensor import Tensor, as_tensor, clip, log, mean, tsum

EPSILON = 0.05
DEFAULT_SMOOTH = 1.0
CE_CLAMP = 1e-7


@dataclass(frozen=True)
class TverskyParams:
    """Loss hyperparameter ``h = (alpha, beta)`` constrained to ``beta = 1 - alpha``.

    ``alpha`` weights false positives and ``beta`` false negatives, so
    ``alpha > beta`` favours undersegmentation.
    """

    alpha: float
    beta: float | None = None

    def __post_init__(self):
        a = float(self.alpha)
        if not 0.0 <= a <= 1.0:
            raise ValueError(f"alpha must lie in [0, 1], got {a}")
        b = 1.0 - a if self.beta is None else float(self.beta)
        if abs(a + b - 1.0) > 1e-12:
            raise ValueError(f"beta must equal 1 - alpha; got alpha={a}, beta={b}")
        object.__setattr__(self, "alpha", a)
        object.__setattr__(self, "beta", b)

    def as_array(self) -> np.ndarray:
        return np.array([[self.alpha, self.beta]])


@dataclass(frozen=True)
class LossConfig:
    smooth: float = DEFAULT_SMOOTH
    dice_ce_mix: float = 0.5

    def __post_init__(self):
        if self.smooth <= 0:
            raise ValueError("smooth must be positive")
        if not 0.0 <= self.dice_ce_mix <= 1.0:
            raise ValueError("dice_ce_mix must lie in [0, 1]")


def _check(p: Tensor, g: Tensor) -> None:
    if p.shape != g.shape:
        raise ValueError(f"prediction shape {p.shape} does not match label shape {g.shape}")


def soft_counts(p, g) -> tuple[Tensor, Tensor, Tensor]:
    p, g = as_tensor(p), as_tensor(g)
    _check(p, g)
    tp = tsum(p * g)
    fp = tsum(p * (1.0 - g))
    fn = tsum((1.0 - p) * g)
    return tp, fp, fn


def tversky_index_tensor(p, g, params: TverskyParams, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    tp, fp, fn = soft_counts(p, g)
    return (tp + smooth) / (tp + params.alpha * fp + params.beta * fn + smooth)


def tversky_index(p, g, params: TverskyParams, smooth: float = DEFAULT_SMOOTH) -> float:
    return tversky_index_tensor(p, g, params, smooth).item()


def tversky_loss(p, g, params: TverskyParams, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    return 1.0 - tversky_index_tensor(p, g, params, smooth)


def soft_dice_loss(p, g, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """``1 - (2 sum(pg) + 2s) / (sum(p) + sum(g) + 2s)``.

    The smoothing is doubled so that this is the same function as
    ``tversky_loss`` at alpha = beta = 0.5 with smoothing ``s``.
    """
    p, g = as_tensor(p), as_tensor(g)
    _check(p, g)
    inter = tsum(p * g)
    return 1.0 - (2.0 * inter + 2.0 * smooth) / (tsum(p) + tsum(g) + 2.0 * smooth)


def binary_cross_entropy(p, g) -> Tensor:
    p, g = as_tensor(p), as_tensor(g)
    _check(p, g)
    pc = clip(p, CE_CLAMP, 1.0 - CE_CLAMP)
    return -mean(g * log(pc) + (1.0 - g) * log(1.0 - pc))


def dice_ce_loss(p, g, mix: float = 0.5, smooth: float = DEFAULT_SMOOTH) -> Tensor:
    """``mix * soft Dice + (1 - mix) * pixel-mean binary cross-entropy``."""
    if mix == 1.0:
        return soft_dice_loss(p, g, smooth)
    if mix == 0.0:
        return binary_cross_entropy(p, g)
    return mix * soft_dice_loss(p, g, smooth) + (1.0 - mix) * binary_cross_entropy(p, g)


def sample_tversky_params(rng: np.random.Generator, eps: float = EPSILON) -> TverskyParams:
    """Draw ``alpha ~ U(eps, 1 - eps)``, ``beta = 1 - alpha``."""
    return TverskyParams(float(rng.uniform(eps, 1.0 - eps)))
