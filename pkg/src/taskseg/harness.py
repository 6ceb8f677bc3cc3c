"""Training and evaluation runs, the panoptic/instance audit, and their file outputs."""

from __future__ import annotations

import logging
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import (
    ClassTable,
    PanopticDataset,
    PanopticLabel,
    Segment,
    TaskGroundTruth,
    TaskKind,
    ValidationError,
    decode_segment_png,
    derive_task_gt,
    parse_meta,
    read_png,
    semantic_map,
    write_dataset,
)
from .config import Config
from .estimator import TaskConditionedSegmenter
from .metrics import compute_ap, compute_miou, compute_pq, format_report
from .postproc import (
    InstancePrediction,
    PanopticPrediction,
    SemanticPrediction,
    instance_inference,
    panoptic_inference,
    semantic_inference,
)

log = logging.getLogger(__name__)

CHECKPOINT_NAME = "model.ckpt"
TRACE_NAME = "loss_trace.tsv"
INSTANCE_META = "instances.meta"
INSTANCE_DIR = "instances"

PRIMARY_METRIC = {TaskKind.PANOPTIC: "pq", TaskKind.INSTANCE: "ap", TaskKind.SEMANTIC: "miou"}


# ---------------------------------------------------------------- training


def load_split(root: str | Path) -> tuple[ClassTable, list[str], list[np.ndarray], list[PanopticLabel]]:
    ds = PanopticDataset(root)
    names, images, labels = [], [], []
    for sample in ds:
        names.append(sample.name)
        images.append(sample.image)
        labels.append(sample.label)
    return ds.classes, names, images, labels


def train(config: Config, data_dir: str | Path, out_dir: str | Path) -> TaskConditionedSegmenter:
    """Fit on ``data_dir`` and write checkpoint, loss trace and resolved config to ``out_dir``."""
    config.validate()
    classes, _, images, labels = load_split(data_dir)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    est = TaskConditionedSegmenter(classes=classes, config=config)
    est.fit(images, labels)
    est.save(out_dir / CHECKPOINT_NAME)
    (out_dir / TRACE_NAME).write_text("".join(row.format() + "\n" for row in est.trace_), encoding="utf-8")
    est.config_.save(out_dir / "config.txt")
    return est


# ---------------------------------------------------------------- evaluation


@dataclass
class TaskPredictions:
    panoptic: list[PanopticPrediction]
    instance: list[InstancePrediction]
    semantic: list[SemanticPrediction]


def predict_all(est: TaskConditionedSegmenter, images: Sequence[np.ndarray], task: TaskKind | str) -> TaskPredictions:
    """Run the model once per image under one task token and post-process three ways."""
    post = est.config_.post
    pan, inst, sem = [], [], []
    for image in images:
        out = est.forward(image, task)
        size = image.shape[:2]
        pan.append(panoptic_inference(out, est.classes, post.object_threshold, post.overlap_threshold, size))
        inst.append(instance_inference(out, est.classes, post.top_k, size))
        sem.append(semantic_inference(out, size))
    return TaskPredictions(pan, inst, sem)


def metrics_for(preds: TaskPredictions, labels: Sequence[PanopticLabel], classes: ClassTable, task: TaskKind) -> dict:
    pq = compute_pq(preds.panoptic, labels, classes)
    ap = compute_ap(preds.instance, [derive_task_gt(lb, classes, TaskKind.INSTANCE) for lb in labels], classes)
    miou = compute_miou(preds.semantic, [semantic_map(lb) for lb in labels], classes)
    report: dict[str, float | str] = {"task": task.value}
    for name, value in pq.lines() + ap.lines() + miou.lines():
        report[name] = float(value)
    report["primary"] = report[PRIMARY_METRIC[task]]
    report["panoptic_stuff_segments"] = float(sum(
        1 for p in preds.panoptic for s in p.segments if not s.is_thing
    ))
    report["instance_stuff_segments"] = float(sum(
        1 for p in preds.instance for i in p.instances if not classes.is_thing(i.class_id)
    ))
    return report


def evaluate_predictions(est, images, labels, task) -> dict:
    task = TaskKind(task)
    return metrics_for(predict_all(est, images, task), labels, est.classes, task)


def prediction_labels(preds: TaskPredictions, classes: ClassTable, task: TaskKind):
    """Pack the task's own predictions into panoptic-format labels plus confidences."""
    labels, confs = [], []
    if task is TaskKind.PANOPTIC:
        for p in preds.panoptic:
            labels.append(p.as_label())
            confs.append(p.confidences)
    elif task is TaskKind.SEMANTIC:
        for p in preds.semantic:
            seg = np.zeros(p.class_map.shape, dtype=np.int64)
            segments = []
            for c in np.unique(p.class_map):
                sid = len(segments) + 1
                seg[p.class_map == c] = sid
                segments.append(Segment(sid, int(c), classes.is_thing(int(c))))
            labels.append(PanopticLabel(seg, segments))
            confs.append([1.0] * len(segments))
    else:
        for p, sem in zip(preds.instance, preds.semantic):
            shape = sem.class_map.shape
            seg = np.zeros(shape, dtype=np.int64)
            # higher scores painted last so they win overlaps
            order = sorted(range(len(p.instances)), key=lambda i: p.instances[i].score)
            for i in order:
                seg[p.instances[i].mask] = i + 1
            present = set(np.unique(seg).tolist())
            segments = [Segment(i + 1, inst.class_id, True) for i, inst in enumerate(p.instances) if i + 1 in present]
            scores = [inst.score for i, inst in enumerate(p.instances) if i + 1 in present]
            labels.append(PanopticLabel(seg, segments))
            confs.append(scores)
    return labels, confs


def evaluate(checkpoint: str | Path, data_dir: str | Path, task: TaskKind | str, out_dir: str | Path) -> dict:
    """Write ``metrics_<task>.tsv`` and ``predictions/<task>/`` for one task token."""
    task = TaskKind(task)
    est = TaskConditionedSegmenter.load(checkpoint)
    classes, names, images, labels = load_split(data_dir)
    if classes != est.classes:
        raise ValidationError("dataset class table differs from the checkpoint's")
    preds = predict_all(est, images, task)
    report = metrics_for(preds, labels, classes, task)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / f"metrics_{task.value}.tsv").write_text(format_report(list(report.items())), encoding="utf-8")
    pred_labels, confs = prediction_labels(preds, classes, task)
    write_dataset(
        out_dir / "predictions" / task.value,
        classes,
        [(f"{n}.png", None, lb) for n, lb in zip(names, pred_labels)],
        confidences=confs,
    )
    return report


# ---------------------------------------------------------------- audit


@dataclass(frozen=True)
class AuditFinding:
    image: str
    kind: str
    panoptic_segments: tuple[int, ...]
    classes: tuple[str, ...]
    instance_id: int | None = None

    def format(self) -> str:
        ext = "-" if self.instance_id is None else str(self.instance_id)
        segs = ",".join(map(str, self.panoptic_segments))
        return f"{self.image}\t{self.kind}\t{segs}\t{','.join(self.classes)}\t{ext}"


def audit_image(name: str, label: PanopticLabel, external: np.ndarray, classes: ClassTable,
                coverage: float = 0.5) -> list[AuditFinding]:
    """Compare panoptic-derived instances with an external instance id map.

    missing: a derived instance no external instance covers at least ``coverage`` of.
    merged: one external instance covering ``coverage`` of two or more derived instances.
    """
    if external.shape != label.segment_map.shape:
        raise ValidationError(f"{name}: instance map {external.shape} vs panoptic {label.segment_map.shape}")
    derived: TaskGroundTruth = derive_task_gt(label, classes, TaskKind.INSTANCE)
    findings = []
    covered_by: dict[int, list[int]] = {}
    for target in derived.targets:
        sid = target.segment_ids[0]
        ids, counts = np.unique(external[target.mask], return_counts=True)
        area = int(target.mask.sum())
        best = 0.0
        for eid, cnt in zip(ids, counts):
            if eid == 0:
                continue
            frac = cnt / area
            best = max(best, frac)
            if frac >= coverage:
                covered_by.setdefault(int(eid), []).append(sid)
        if best < coverage:
            findings.append(AuditFinding(name, "missing", (sid,), (classes[target.class_id].name,)))
    for eid, sids in sorted(covered_by.items()):
        if len(sids) > 1:
            names = tuple(classes[label.segment(s).class_id].name for s in sids)
            findings.append(AuditFinding(name, "merged", tuple(sids), names, eid))
    return findings


def audit(data_dir: str | Path, instances_dir: str | Path) -> list[AuditFinding]:
    ds = PanopticDataset(data_dir)
    instances_dir = Path(instances_dir)
    _, records = parse_meta((instances_dir / INSTANCE_META).read_text(encoding="utf-8"))
    by_name = {r.file_name: r for r in records}
    findings = []
    for rec in ds.records:
        label = PanopticLabel(decode_segment_png(read_png(ds.root / "panoptic" / rec.file_name)), list(rec.segments))
        label.validate(ds.classes)
        if rec.file_name in by_name:
            external = decode_segment_png(read_png(instances_dir / INSTANCE_DIR / rec.file_name))
        else:
            external = np.zeros_like(label.segment_map)
        findings.extend(audit_image(Path(rec.file_name).stem, label, external, ds.classes))
    return findings


def write_instance_file(root: str | Path, classes: ClassTable, items: Sequence[tuple[str, PanopticLabel]]) -> None:
    """Store an external instance annotation set (id map + sidecar) for ``audit``."""
    write_dataset(root, classes, [(name, None, lb) for name, lb in items], meta_name=INSTANCE_META, map_dir=INSTANCE_DIR)
