"""Prediction-to-target cost matrices and least-cost bipartite assignment."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy.optimize import linear_sum_assignment

from .annotations import CapacityError
from .gradkernel import NumericError
from .losses import LossWeights


@dataclass
class MatchResult:
    pairs: list[tuple[int, int]]
    unmatched_queries: list[int] = field(default_factory=list)

    @property
    def query_indices(self) -> list[int]:
        return [q for q, _ in self.pairs]

    @property
    def target_indices(self) -> list[int]:
        return [t for _, t in self.pairs]


def _softplus(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0) + np.log1p(np.exp(-np.abs(x)))


def _sigmoid(x: np.ndarray) -> np.ndarray:
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def match_cost_matrix(class_probs: np.ndarray, mask_logits: np.ndarray, gt_classes, gt_masks: np.ndarray,
                      weights: LossWeights) -> np.ndarray:
    """N x M cost of assigning query q to target t.

    cls term is the negated probability of the target class; bce is the mean
    per-pixel sigmoid cross-entropy; dice uses smoothing 1, like the losses.
    """
    probs = np.asarray(class_probs, dtype=np.float64)
    x = np.asarray(mask_logits, dtype=np.float64).reshape(probs.shape[0], -1)
    g = np.asarray(gt_masks, dtype=np.float64).reshape(len(gt_classes), -1)
    n, m = probs.shape[0], g.shape[0]
    if m > n:
        raise CapacityError(f"{m} targets exceed {n} queries")
    if m == 0:
        return np.zeros((n, 0))
    pixels = x.shape[1]
    cost_cls = -probs[:, np.asarray(gt_classes, dtype=np.int64)]
    cost_bce = (_softplus(x).sum(axis=1, keepdims=True) - x @ g.T) / pixels
    p = _sigmoid(x)
    cost_dice = 1.0 - (2.0 * (p @ g.T) + 1.0) / (p.sum(axis=1)[:, None] + g.sum(axis=1)[None, :] + 1.0)
    return weights.cls * cost_cls + weights.bce * cost_bce + weights.dice * cost_dice


def hungarian_solve(cost: np.ndarray) -> MatchResult:
    """Minimum-total-cost assignment of every target (column) to a distinct query (row)."""
    cost = np.asarray(cost, dtype=np.float64)
    if cost.ndim != 2:
        raise ValueError(f"cost must be 2-D, got shape {cost.shape}")
    if not np.all(np.isfinite(cost)):
        raise NumericError("cost matrix has non-finite entries")
    n, m = cost.shape
    if m == 0:
        return MatchResult([], list(range(n)))
    rows, cols = linear_sum_assignment(cost)
    pairs = sorted((int(r), int(c)) for r, c in zip(rows, cols))
    used = {r for r, _ in pairs}
    return MatchResult(pairs, [q for q in range(n) if q not in used])


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


def match_stage(class_logits: np.ndarray, mask_logits: np.ndarray, gt_classes, gt_masks: np.ndarray,
                weights: LossWeights) -> MatchResult:
    cost = match_cost_matrix(softmax_np(np.asarray(class_logits, dtype=np.float64)), mask_logits,
                             gt_classes, gt_masks, weights)
    return hungarian_solve(cost)
