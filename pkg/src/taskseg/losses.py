"""Query-text contrastive loss, classification CE, mask BCE + dice and their weighted total."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from . import gradkernel as gk
from .gradkernel import ShapeError, Tensor
from .nn import Module


class EmptyBatchError(ValueError):
    pass


class ConsistencyError(ValueError):
    pass


@dataclass(frozen=True)
class LossWeights:
    contrastive: float = 0.5
    cls: float = 2.0
    bce: float = 5.0
    dice: float = 5.0
    no_object: float = 0.1

    def __post_init__(self):
        for name in ("contrastive", "cls", "bce", "dice", "no_object"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value >= 0):
                raise ValueError(f"loss weight {name} must be finite and non-negative, got {value}")

    def scaled(self, factor: float) -> "LossWeights":
        return LossWeights(*(factor * getattr(self, n) for n in ("contrastive", "cls", "bce", "dice", "no_object")))


class Temperature(Module):
    """Learnable contrastive temperature, stored as log(tau)."""

    def __init__(self, inv_tau: float = 1.0 / 0.07):
        self.log_tau = gk.parameter(np.array(-math.log(inv_tau)))

    @property
    def tau(self) -> float:
        return float(np.exp(self.log_tau.data))


def _diag_nll(logits: Tensor) -> Tensor:
    b = logits.shape[0]
    logp = gk.log_softmax(logits)
    return -gk.sum(logp[np.arange(b), np.arange(b)]) / float(b)


def contrastive_loss(obj, txt, temp: Temperature, normalize: bool = True) -> Tensor:
    """Symmetric InfoNCE between paired rows of ``obj`` and ``txt``.

    Row i of each is a positive pair; every other row in the batch is a
    negative. Returns object->text plus text->object.
    """
    obj, txt = gk._as_tensor(obj), gk._as_tensor(txt)
    if obj.shape != txt.shape:
        raise ShapeError(f"object and text batches differ: {obj.shape} vs {txt.shape}")
    if obj.shape[0] == 0:
        raise EmptyBatchError("contrastive loss needs at least one pair")
    if normalize:
        obj, txt = gk.l2_normalize(obj), gk.l2_normalize(txt)
    logits = gk.matmul(obj, gk.transpose(txt)) * gk.exp(-temp.log_tau)
    return _diag_nll(logits) + _diag_nll(gk.transpose(logits))


def classification_loss(class_logits, assigned: np.ndarray, weights: LossWeights) -> Tensor:
    """Mean over queries of weighted CE; no-object queries get ``weights.no_object``."""
    class_logits = gk._as_tensor(class_logits)
    n, k1 = class_logits.shape
    assigned = np.asarray(assigned, dtype=np.int64)
    if assigned.shape != (n,):
        raise ShapeError(f"expected {n} assigned classes, got shape {assigned.shape}")
    if assigned.size and (assigned.min() < 0 or assigned.max() >= k1):
        raise IndexError(f"assigned classes must lie in [0, {k1 - 1}]")
    w = np.where(assigned == k1 - 1, weights.no_object, 1.0).astype(np.float32)
    logp = gk.log_softmax(class_logits)
    picked = logp[np.arange(n), assigned]
    return -gk.sum(picked * w) / float(n)


def mask_losses(mask_logits, gt_masks: np.ndarray) -> tuple[Tensor, Tensor]:
    """(mean per-pixel sigmoid BCE, mean over masks of smoothed dice loss)."""
    mask_logits = gk._as_tensor(mask_logits)
    gt = np.asarray(gt_masks, dtype=np.float32)
    if mask_logits.shape != gt.shape:
        raise ShapeError(f"mask logits {mask_logits.shape} vs targets {gt.shape}")
    m = mask_logits.shape[0]
    x = gk.reshape(mask_logits, (m, -1))
    g = gt.reshape(m, -1)
    bce = gk.mean(gk.softplus(x) - x * g)
    p = gk.sigmoid(x)
    numer = 2.0 * gk.sum(p * g, axis=1) + 1.0
    denom = gk.sum(p, axis=1) + g.sum(axis=1) + 1.0
    dice = gk.mean(1.0 - numer / denom)
    return bce, dice


@dataclass
class LossBreakdown:
    total: Tensor
    contrastive: float
    cls: float
    bce: float
    dice: float


def stage_losses(class_logits: Tensor, mask_logits: Tensor, match, gt_masks: np.ndarray, gt_classes, weights: LossWeights):
    """(cls, bce, dice) tensors for one prediction set under one matching."""
    n, k1 = class_logits.shape
    assigned = np.full(n, k1 - 1, dtype=np.int64)
    q_idx = np.array([q for q, _ in match.pairs], dtype=np.int64)
    t_idx = np.array([t for _, t in match.pairs], dtype=np.int64)
    if len(q_idx):
        assigned[q_idx] = np.asarray(gt_classes, dtype=np.int64)[t_idx]
    cls = classification_loss(class_logits, assigned, weights)
    if len(q_idx) == 0:
        zero = gk.tensor(0.0)
        return cls, zero, zero
    bce, dice = mask_losses(gk.take(mask_logits, q_idx, axis=0), gt_masks[t_idx])
    return cls, bce, dice


def target_masks(gt, size: tuple[int, int]) -> np.ndarray:
    """GT masks pooled to ``size``: a cell is on when at least half its pixels are."""
    masks = gt.masks()
    if masks.shape[0] == 0:
        return np.zeros((0, *size), dtype=np.float32)
    m, h, w = masks.shape
    if (h, w) == tuple(size):
        return masks.astype(np.float32)
    if h % size[0] or w % size[1]:
        raise ShapeError(f"cannot pool {h}x{w} masks to {size}")
    fh, fw = h // size[0], w // size[1]
    pooled = masks.reshape(m, size[0], fh, size[1], fw).mean(axis=(2, 4))
    return (pooled >= 0.5).astype(np.float32)


def total_loss(outputs, matches, gt, cl, weights: LossWeights) -> LossBreakdown:
    """Weighted sum over every supervised prediction set plus the contrastive term.

    ``matches`` must hold one MatchResult per entry of ``outputs.stages()``.
    """
    stages = outputs.stages()
    if len(matches) != len(stages):
        raise ConsistencyError(f"{len(stages)} prediction sets but {len(matches)} matchings")
    gt_masks = target_masks(gt, outputs.mask_logits.shape[1:])
    gt_classes = gt.class_ids
    cl = gk._as_tensor(cl)
    total = cl * weights.contrastive
    last = None
    for (cls_logits, mask_logits), match in zip(stages, matches):
        if match is None:
            raise ConsistencyError("missing matching for a prediction set")
        c, b, d = stage_losses(cls_logits, mask_logits, match, gt_masks, gt_classes, weights)
        total = total + c * weights.cls + b * weights.bce + d * weights.dice
        last = (c, b, d)
    c, b, d = last
    return LossBreakdown(total, float(cl.data), float(c.data), float(b.data), float(d.data))


def combine_components(contrastive: float, stage_components, weights: LossWeights) -> float:
    """Plain-float version of the weighted total, used to cross-check ``total_loss``."""
    total = weights.contrastive * contrastive
    for c, b, d in stage_components:
        total += weights.cls * c + weights.bce * b + weights.dice * d
    return total
