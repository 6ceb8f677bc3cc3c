"""Panoptic quality, mask AP and mIoU evaluators.

Statistics are accumulated per image and merged by addition, so evaluation can
be mapped over images in any order.
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .annotations import ClassTable, PanopticLabel, TaskGroundTruth, ValidationError
from .gradkernel import ShapeError

IOU_THRESHOLDS = tuple(float(t) for t in np.round(np.linspace(0.5, 0.95, 10), 2))
RECALL_POINTS = np.linspace(0.0, 1.0, 101)


@dataclass
class PQStat:
    iou_sum: float = 0.0
    tp: int = 0
    fp: int = 0
    fn: int = 0

    def __iadd__(self, other: "PQStat") -> "PQStat":
        self.iou_sum += other.iou_sum
        self.tp += other.tp
        self.fp += other.fp
        self.fn += other.fn
        return self

    def as_tuple(self) -> tuple[float, int, int, int]:
        return (self.iou_sum, self.tp, self.fp, self.fn)


@dataclass
class PQReport:
    pq: float
    sq: float
    rq: float
    pq_things: float
    pq_stuff: float
    per_class: dict[int, tuple[float, int, int, int]] = field(default_factory=dict)

    def lines(self) -> list[tuple[str, float]]:
        return [("pq", self.pq), ("sq", self.sq), ("rq", self.rq), ("pq_things", self.pq_things), ("pq_stuff", self.pq_stuff)]


@dataclass
class APReport:
    ap: float
    per_threshold: dict[float, float] = field(default_factory=dict)

    def lines(self) -> list[tuple[str, float]]:
        out = [("ap", self.ap)]
        for t in (0.5, 0.75):
            if t in self.per_threshold:
                out.append((f"ap{int(round(t * 100))}", self.per_threshold[t]))
        return out


@dataclass
class IoUReport:
    miou: float
    per_class_iou: dict[int, float] = field(default_factory=dict)

    def lines(self) -> list[tuple[str, float]]:
        return [("miou", self.miou)]


# ---------------------------------------------------------------- PQ


def pq_image_stats(pred: PanopticLabel, gt: PanopticLabel) -> dict[int, PQStat]:
    """Per-class TP/FP/FN and matched IoU sum for one image."""
    if pred.segment_map.shape != gt.segment_map.shape:
        raise ShapeError(f"prediction {pred.segment_map.shape} vs ground truth {gt.segment_map.shape}")
    gt_map = gt.segment_map.astype(np.int64)
    pr_map = pred.segment_map.astype(np.int64)
    offset = int(max(gt_map.max(initial=0), pr_map.max(initial=0))) + 1
    pair_ids, pair_counts = np.unique(gt_map * offset + pr_map, return_counts=True)
    overlap = {(int(i // offset), int(i % offset)): int(c) for i, c in zip(pair_ids, pair_counts)}
    gt_area = defaultdict(int)
    pr_area = defaultdict(int)
    for (g, p), c in overlap.items():
        gt_area[g] += c
        pr_area[p] += c
    gt_segs = {s.segment_id: s for s in gt.segments if gt_area.get(s.segment_id)}
    pr_segs = {s.segment_id: s for s in pred.segments if pr_area.get(s.segment_id)}

    stats: dict[int, PQStat] = defaultdict(PQStat)
    matched_gt: set[int] = set()
    matched_pr: set[int] = set()
    for (g, p), inter in overlap.items():
        if g not in gt_segs or p not in pr_segs:
            continue
        if gt_segs[g].class_id != pr_segs[p].class_id:
            continue
        union = gt_area[g] + pr_area[p] - inter - overlap.get((0, p), 0)
        iou = inter / union
        if iou > 0.5:
            st = stats[gt_segs[g].class_id]
            st.tp += 1
            st.iou_sum += iou
            matched_gt.add(g)
            matched_pr.add(p)
    for g, seg in gt_segs.items():
        if g not in matched_gt:
            stats[seg.class_id].fn += 1
    for p, seg in pr_segs.items():
        if p in matched_pr:
            continue
        # predictions lying mostly on unlabeled pixels are not penalised
        if overlap.get((0, p), 0) / pr_area[p] > 0.5:
            continue
        stats[seg.class_id].fp += 1
    return dict(stats)


def _as_label(x) -> PanopticLabel:
    return x.as_label() if hasattr(x, "as_label") else x


def pq_from_stats(stats: dict[int, PQStat], classes: ClassTable) -> PQReport:
    def average(ids):
        pq = sq = rq = 0.0
        n = 0
        for c in ids:
            st = stats.get(c)
            if st is None or st.tp + st.fp + st.fn == 0:
                continue
            denom = st.tp + 0.5 * st.fp + 0.5 * st.fn
            pq += st.iou_sum / denom
            sq += st.iou_sum / st.tp if st.tp else 0.0
            rq += st.tp / denom
            n += 1
        return (pq / n, sq / n, rq / n) if n else (0.0, 0.0, 0.0)

    all_ids = range(len(classes))
    pq, sq, rq = average(all_ids)
    return PQReport(
        pq,
        sq,
        rq,
        average(classes.thing_ids)[0],
        average(classes.stuff_ids)[0],
        {c: st.as_tuple() for c, st in sorted(stats.items())},
    )


def compute_pq(preds: Sequence, gts: Sequence[PanopticLabel], classes: ClassTable) -> PQReport:
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    total: dict[int, PQStat] = defaultdict(PQStat)
    for pred, gt in zip(preds, gts):
        for c, st in pq_image_stats(_as_label(pred), gt).items():
            total[c] += st
    return pq_from_stats(total, classes)


# ---------------------------------------------------------------- mIoU


def confusion_matrix(pred: np.ndarray, gt: np.ndarray, num_classes: int) -> np.ndarray:
    pred = np.asarray(pred, dtype=np.int64)
    gt = np.asarray(gt, dtype=np.int64)
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    valid = gt >= 0
    if np.any(gt[valid] >= num_classes) or np.any(pred[valid] < 0) or np.any(pred[valid] >= num_classes):
        raise IndexError(f"class ids must lie in [0, {num_classes})")
    idx = gt[valid] * num_classes + pred[valid]
    return np.bincount(idx, minlength=num_classes * num_classes).reshape(num_classes, num_classes)


def compute_miou(preds: Sequence, gts: Sequence[np.ndarray], classes: ClassTable) -> IoUReport:
    """Global confusion matrix; mean IoU over classes that occur in the ground truth."""
    k = len(classes)
    conf = np.zeros((k, k), dtype=np.int64)
    for pred, gt in zip(preds, gts):
        pred = pred.class_map if hasattr(pred, "class_map") else pred
        conf += confusion_matrix(pred, gt, k)
    tp = np.diag(conf)
    gt_count = conf.sum(axis=1)
    pred_count = conf.sum(axis=0)
    per_class = {}
    for c in range(k):
        if gt_count[c] == 0:
            continue
        per_class[c] = float(tp[c] / (gt_count[c] + pred_count[c] - tp[c]))
    miou = float(np.mean(list(per_class.values()))) if per_class else 0.0
    return IoUReport(miou, per_class)


# ---------------------------------------------------------------- AP


def _mask_iou(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """IoU between every mask in a (n, H, W) and b (m, H, W)."""
    fa = a.reshape(a.shape[0], -1).astype(np.float64)
    fb = b.reshape(b.shape[0], -1).astype(np.float64)
    inter = fa @ fb.T
    union = fa.sum(1)[:, None] + fb.sum(1)[None, :] - inter
    return np.where(union > 0, inter / np.maximum(union, 1), 0.0)


def _interpolated_ap(tp: np.ndarray, n_gt: int) -> float:
    if tp.size == 0:
        return 0.0
    tp_cum = np.cumsum(tp)
    fp_cum = np.cumsum(1 - tp)
    recall = tp_cum / n_gt
    precision = tp_cum / (tp_cum + fp_cum)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    values = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(values.mean())


def compute_ap(preds: Sequence, gts: Sequence[TaskGroundTruth], classes: ClassTable) -> APReport:
    """COCO-style mask AP: greedy score-ordered matching, 101-point interpolation,
    averaged over IoU thresholds 0.50:0.05:0.95 and classes with ground truth."""
    if len(preds) != len(gts):
        raise ValueError(f"{len(preds)} predictions for {len(gts)} ground truths")
    for gt in gts:
        for t in gt.targets:
            if not classes.is_thing(t.class_id):
                raise ValidationError(f"instance ground truth contains stuff class {classes[t.class_id].name!r}")
    per_threshold: dict[float, list[float]] = {t: [] for t in IOU_THRESHOLDS}
    for c in classes.thing_ids:
        gt_masks = [np.array([t.mask for t in gt.targets if t.class_id == c]) for gt in gts]
        n_gt = sum(len(m) for m in gt_masks)
        if n_gt == 0:
            continue
        dets = []
        for img, pred in enumerate(preds):
            for inst in pred.instances:
                if inst.class_id == c:
                    dets.append((inst.score, img, inst.mask))
        order = sorted(range(len(dets)), key=lambda i: -dets[i][0])
        ious = []
        for i in order:
            _, img, mask = dets[i]
            g = gt_masks[img]
            ious.append(_mask_iou(mask[None], g)[0] if len(g) else np.zeros(0))
        for t in IOU_THRESHOLDS:
            taken = [np.zeros(len(g), dtype=bool) for g in gt_masks]
            tp = np.zeros(len(order))
            for rank, i in enumerate(order):
                img = dets[i][1]
                row = np.where(taken[img], -1.0, ious[rank])
                if row.size and row.max() >= t - 1e-12:
                    j = int(row.argmax())
                    taken[img][j] = True
                    tp[rank] = 1
            per_threshold[t].append(_interpolated_ap(tp, n_gt))
    means = {t: float(np.mean(v)) if v else 0.0 for t, v in per_threshold.items()}
    return APReport(float(np.mean(list(means.values()))), means)


def format_report(pairs: Sequence[tuple[str, float | str]]) -> str:
    lines = []
    for name, value in pairs:
        lines.append(f"{name}\t{value:.6f}" if isinstance(value, float) else f"{name}\t{value}")
    return "\n".join(lines) + "\n"
