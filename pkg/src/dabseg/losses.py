"""Training objective: weighted soft-Dice segmentation loss plus an optional
clean-reference reconstruction term on the deblurring stem output."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .autodiff import ShapeError, Tensor, as_tensor


class MissingCleanReferenceError(ValueError):
    """Joint training needs a clean reference volume that is not available."""


@dataclass(frozen=True)
class ClassWeights:
    """Per-region weights in (ET, TC, WT) order with a switch-on epoch."""

    w_et: float = 2.0
    w_tc: float = 1.0
    w_wt: float = 1.0
    activation_epoch: int = 0

    def __post_init__(self):
        if min(self.w_et, self.w_tc, self.w_wt) <= 0:
            raise ValueError(f"class weights must be positive, got {self.as_array()}")

    def as_array(self) -> np.ndarray:
        return np.array([self.w_et, self.w_tc, self.w_wt], dtype=np.float64)

    @classmethod
    def uniform(cls) -> "ClassWeights":
        return cls(1.0, 1.0, 1.0)


@dataclass(frozen=True)
class JointLossConfig:
    lambda_rec: float = 0.1
    dice_smooth_eps: float = 1e-5
    rec_l1: bool = False

    def __post_init__(self):
        if self.lambda_rec < 0:
            raise ValueError(f"lambda_rec must be nonnegative, got {self.lambda_rec}")


def soft_dice_per_class(p, g, eps: float = 1e-5) -> Tensor:
    """(2*sum(p*g) + eps) / (sum(p) + sum(g) + eps) for one class volume."""
    p = as_tensor(p)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs target {g.shape}")
    inter = (p * g).sum()
    denom = p.sum() + float(g.sum())
    return (2.0 * inter + eps) / (denom + eps)


def soft_dice_batch(p, g, eps: float = 1e-5) -> Tensor:
    """Batch-averaged per-class soft Dice: [B, C, ...] -> [C]."""
    p = as_tensor(p)
    g = np.asarray(g, dtype=np.float64)
    if p.shape != g.shape:
        raise ShapeError(f"prediction {p.shape} vs target {g.shape}")
    if p.ndim < 3:
        raise ShapeError(f"expected [B, C, spatial...], got {p.shape}")
    spatial = tuple(range(2, p.ndim))
    inter = (p * g).sum(axis=spatial)
    denom = p.sum(axis=spatial) + g.sum(axis=spatial)
    dice = (2.0 * inter + eps) / (denom + eps)
    return dice.mean(axis=0)


def weighted_dice_loss(p, g, weights: ClassWeights | None = None, eps: float = 1e-5) -> Tensor:
    """1 - sum_c w_c Dice_c / sum_c w_c over (ET, TC, WT) channels."""
    weights = weights or ClassWeights.uniform()
    w = weights.as_array()
    p = as_tensor(p)
    if p.ndim < 3 or p.shape[1] != 3:
        raise ShapeError(f"expected [B, 3, spatial...], got {p.shape}")
    dice_c = soft_dice_batch(p, g, eps=eps)
    return 1.0 - (dice_c * w).sum() / float(w.sum())


def recon_loss(v, v_clear, l1: bool = False) -> Tensor:
    """Mean voxel error between the stem output and the clean reference."""
    if v_clear is None:
        raise MissingCleanReferenceError("reconstruction loss requires a clean reference volume")
    v = as_tensor(v)
    v_clear = np.asarray(v_clear, dtype=np.float64)
    if v.shape != v_clear.shape:
        raise ShapeError(f"stem output {v.shape} vs clean reference {v_clear.shape}")
    diff = v - v_clear
    if l1:
        # |x| as x * sign(x); sign treated as constant
        return (diff * np.sign(diff.data)).mean()
    return (diff * diff).mean()


def joint_loss(l_seg: Tensor, l_rec: Tensor | float, cfg: JointLossConfig) -> Tensor:
    if cfg.lambda_rec == 0:
        return as_tensor(l_seg)
    return as_tensor(l_seg) + cfg.lambda_rec * as_tensor(l_rec)
