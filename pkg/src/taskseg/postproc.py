"""Turn per-query class distributions and mask logits into task predictions."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .annotations import ClassTable, PanopticLabel, Segment
from .matcher import softmax_np


@dataclass
class PanopticPrediction:
    segment_map: np.ndarray
    segments: list[Segment]
    confidences: list[float]

    def as_label(self) -> PanopticLabel:
        return PanopticLabel(self.segment_map, list(self.segments))


@dataclass
class Instance:
    class_id: int
    mask: np.ndarray
    score: float


@dataclass
class InstancePrediction:
    instances: list[Instance] = field(default_factory=list)


@dataclass
class SemanticPrediction:
    class_map: np.ndarray


def upsample_bilinear(x: np.ndarray, size: tuple[int, int]) -> np.ndarray:
    """Bilinear resize of (..., h, w) with half-pixel centres."""
    h, w = x.shape[-2:]
    if (h, w) == tuple(size):
        return x

    def axis(n_in, n_out):
        pos = np.clip((np.arange(n_out) + 0.5) * n_in / n_out - 0.5, 0, n_in - 1)
        lo = np.floor(pos).astype(np.int64)
        hi = np.minimum(lo + 1, n_in - 1)
        return lo, hi, pos - lo

    r0, r1, fr = axis(h, size[0])
    c0, c1, fc = axis(w, size[1])
    top = x[..., r0, :] * (1 - fr)[:, None] + x[..., r1, :] * fr[:, None]
    return top[..., c0] * (1 - fc) + top[..., c1] * fc


def _sigmoid(x):
    e = np.exp(-np.abs(x))
    return np.where(x >= 0, 1.0 / (1.0 + e), e / (1.0 + e))


def _unpack(out, size):
    """(class probs N x (K+1), mask probs N x H x W) as float64."""
    cls = out.class_logits.data if hasattr(out.class_logits, "data") else out.class_logits
    masks = out.mask_logits.data if hasattr(out.mask_logits, "data") else out.mask_logits
    probs = softmax_np(np.asarray(cls, dtype=np.float64))
    masks = np.asarray(masks, dtype=np.float64)
    if size is not None:
        masks = upsample_bilinear(masks, size)
    return probs, _sigmoid(masks)


def semantic_inference(out, size: tuple[int, int] | None = None) -> SemanticPrediction:
    probs, masks = _unpack(out, size)
    scores = np.einsum("qc,qhw->chw", probs[:, :-1], masks)
    return SemanticPrediction(scores.argmax(axis=0))


def panoptic_inference(out, classes: ClassTable, object_threshold: float = 0.8, overlap_threshold: float = 0.8,
                       size: tuple[int, int] | None = None) -> PanopticPrediction:
    probs, masks = _unpack(out, size)
    k = probs.shape[1] - 1
    scores = probs[:, :k].max(axis=1)
    labels = probs[:, :k].argmax(axis=1)
    keep = np.flatnonzero(scores >= object_threshold)
    h, w = masks.shape[1:]
    seg_map = np.zeros((h, w), dtype=np.int64)
    segments: list[Segment] = []
    confidences: list[float] = []
    if keep.size == 0:
        return PanopticPrediction(seg_map, segments, confidences)
    weighted = scores[keep, None, None] * masks[keep]
    owner = weighted.argmax(axis=0)
    stuff_ids: dict[int, int] = {}
    for j, q in enumerate(keep):
        cls = int(labels[q])
        binary = masks[q] >= 0.5
        original = int(binary.sum())
        region = (owner == j) & binary
        area = int(region.sum())
        if original == 0 or area == 0 or area / original < overlap_threshold:
            continue
        thing = classes.is_thing(cls)
        if not thing and cls in stuff_ids:
            seg_map[region] = stuff_ids[cls]
            continue
        sid = len(segments) + 1
        seg_map[region] = sid
        segments.append(Segment(sid, cls, thing))
        confidences.append(float(scores[q]))
        if not thing:
            stuff_ids[cls] = sid
    return PanopticPrediction(seg_map, segments, confidences)


def instance_inference(out, classes: ClassTable, top_k: int = 16, size: tuple[int, int] | None = None) -> InstancePrediction:
    """Top-k (query, class) pairs over all classes, then stuff pairs are dropped."""
    probs, masks = _unpack(out, size)
    k = probs.shape[1] - 1
    flat = probs[:, :k].reshape(-1)
    top_k = min(top_k, flat.size)
    # stable sort keeps lower (query, class) first on ties
    order = np.argsort(-flat, kind="stable")[:top_k]
    instances = []
    for idx in order:
        q, c = divmod(int(idx), k)
        if not classes.is_thing(c):
            continue
        binary = masks[q] >= 0.5
        mask_score = float((masks[q] * binary).sum() / (binary.sum() + 1e-6))
        instances.append(Instance(c, binary, float(flat[idx]) * mask_score))
    instances.sort(key=lambda inst: -inst.score)
    return InstancePrediction(instances)
