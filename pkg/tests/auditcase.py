"""Hand-built panoptic set plus an external instance set with known discrepancies."""

import numpy as np

from taskseg.annotations import ClassTable, PanopticLabel, Segment, write_dataset
from taskseg.harness import write_instance_file

CLASSES = ClassTable.from_pairs([("car", True), ("person", True), ("road", False), ("sky", False)])


def street() -> PanopticLabel:
    seg = np.zeros((8, 8), dtype=np.int64)
    seg[2:, :] = 3
    seg[:2, :] = 5
    seg[3:5, 1:3] = 1
    seg[5:7, 5:8] = 2
    seg[2:4, 5:7] = 4
    return PanopticLabel(seg, [Segment(1, 0, True), Segment(2, 0, True), Segment(3, 2, False),
                               Segment(4, 1, True), Segment(5, 3, False)])


def exact_instances(label: PanopticLabel) -> PanopticLabel:
    seg = np.zeros_like(label.segment_map)
    segments = []
    for s in label.segments:
        if s.is_thing:
            seg[label.segment_map == s.segment_id] = len(segments) + 1
            segments.append(Segment(len(segments) + 1, s.class_id, True))
    return PanopticLabel(seg, segments)


def flawed_instances(label: PanopticLabel) -> PanopticLabel:
    """Both cars under one id; the person left out."""
    seg = np.zeros_like(label.segment_map)
    seg[np.isin(label.segment_map, [1, 2])] = 1
    return PanopticLabel(seg, [Segment(1, 0, True)])


def write_fixture(root, flawed: bool = True):
    """Returns (panoptic dir, instance dir)."""
    label = street()
    rng = np.random.default_rng(0)
    image = rng.integers(0, 256, (8, 8, 3), dtype=np.uint8)
    pan, inst = root / "panoptic_set", root / "instance_set"
    write_dataset(pan, CLASSES, [("street.png", image, label), ("clean.png", image, label)])
    first = flawed_instances(label) if flawed else exact_instances(label)
    write_instance_file(inst, CLASSES, [("street.png", first), ("clean.png", exact_instances(label))])
    return pan, inst
