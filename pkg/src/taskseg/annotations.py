"""Panoptic annotations, task sampling and task-specific ground truth.

A single panoptic label per image is the only annotation source. Semantic and
instance targets are derived from it on the fly for whichever task was drawn.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from PIL import Image

META_NAME = "panoptic.meta"
META_HEADER = "taskseg-panoptic-meta"
META_VERSION = "1"


class ValidationError(ValueError):
    """Raised for structurally invalid labels, class tables or metadata."""

    def __init__(self, message: str, segment_id: int | None = None):
        super().__init__(message)
        self.segment_id = segment_id


class CapacityError(ValueError):
    pass


class TaskKind(str, enum.Enum):
    PANOPTIC = "panoptic"
    INSTANCE = "instance"
    SEMANTIC = "semantic"

    def __str__(self) -> str:
        return self.value


TASKS: tuple[TaskKind, ...] = (TaskKind.PANOPTIC, TaskKind.INSTANCE, TaskKind.SEMANTIC)


@dataclass(frozen=True)
class ClassInfo:
    class_id: int
    name: str
    is_thing: bool


@dataclass(frozen=True)
class ClassTable:
    entries: tuple[ClassInfo, ...]

    def __post_init__(self):
        ids = [c.class_id for c in self.entries]
        if ids != list(range(len(ids))):
            raise ValidationError(f"class ids must be contiguous from 0, got {ids}")
        for c in self.entries:
            if not c.name.strip():
                raise ValidationError(f"class {c.class_id} has an empty name")

    @classmethod
    def from_pairs(cls, pairs: Iterable[tuple[str, bool]]) -> "ClassTable":
        return cls(tuple(ClassInfo(i, name, bool(thing)) for i, (name, thing) in enumerate(pairs)))

    def __len__(self) -> int:
        return len(self.entries)

    def __getitem__(self, class_id: int) -> ClassInfo:
        return self.entries[class_id]

    @property
    def names(self) -> list[str]:
        return [c.name for c in self.entries]

    @property
    def thing_ids(self) -> list[int]:
        return [c.class_id for c in self.entries if c.is_thing]

    @property
    def stuff_ids(self) -> list[int]:
        return [c.class_id for c in self.entries if not c.is_thing]

    def is_thing(self, class_id: int) -> bool:
        return self.entries[class_id].is_thing


@dataclass(frozen=True)
class Segment:
    segment_id: int
    class_id: int
    is_thing: bool


@dataclass
class PanopticLabel:
    segment_map: np.ndarray
    segments: list[Segment]

    @property
    def height(self) -> int:
        return int(self.segment_map.shape[0])

    @property
    def width(self) -> int:
        return int(self.segment_map.shape[1])

    def segment(self, segment_id: int) -> Segment:
        for s in self.segments:
            if s.segment_id == segment_id:
                return s
        raise KeyError(segment_id)

    def validate(self, classes: ClassTable) -> None:
        if self.segment_map.ndim != 2 or 0 in self.segment_map.shape:
            raise ValidationError(f"segment map must be a non-empty H x W array, got {self.segment_map.shape}")
        known: dict[int, Segment] = {}
        stuff_classes: set[int] = set()
        for s in self.segments:
            if s.segment_id <= 0:
                raise ValidationError(f"segment id must be positive, got {s.segment_id}", s.segment_id)
            if s.segment_id in known:
                raise ValidationError(f"segment id {s.segment_id} listed twice", s.segment_id)
            if not 0 <= s.class_id < len(classes):
                raise ValidationError(f"segment {s.segment_id} has unknown class {s.class_id}", s.segment_id)
            if s.is_thing != classes.is_thing(s.class_id):
                raise ValidationError(
                    f"segment {s.segment_id}: is_thing={s.is_thing} disagrees with class "
                    f"{classes[s.class_id].name!r}",
                    s.segment_id,
                )
            if not s.is_thing:
                if s.class_id in stuff_classes:
                    raise ValidationError(
                        f"stuff class {classes[s.class_id].name!r} has more than one segment", s.segment_id
                    )
                stuff_classes.add(s.class_id)
            known[s.segment_id] = s
        for sid in np.unique(self.segment_map):
            if sid != 0 and int(sid) not in known:
                raise ValidationError(f"segment id {int(sid)} in map is absent from segments", int(sid))


@dataclass
class Target:
    class_id: int
    mask: np.ndarray
    segment_ids: tuple[int, ...] = ()


@dataclass
class TaskGroundTruth:
    task: TaskKind
    targets: list[Target] = field(default_factory=list)

    @property
    def class_ids(self) -> list[int]:
        return [t.class_id for t in self.targets]

    def masks(self) -> np.ndarray:
        if not self.targets:
            return np.zeros((0, 0, 0), dtype=bool)
        return np.stack([t.mask for t in self.targets])


def sample_task(rng: np.random.Generator) -> TaskKind:
    """Draw one of the three tasks uniformly."""
    return TASKS[int(rng.integers(len(TASKS)))]


def derive_task_gt(label: PanopticLabel, classes: ClassTable, task: TaskKind | str) -> TaskGroundTruth:
    """Turn a panoptic label into the target set for ``task``.

    panoptic: one target per thing segment, one per stuff class.
    instance: thing segments only.
    semantic: one merged target per class present.
    Targets are ordered by (class_id, smallest segment id); unlabeled pixels
    never appear in any mask.
    """
    task = TaskKind(task)
    label.validate(classes)
    seg_map = label.segment_map
    present = [s for s in label.segments if np.any(seg_map == s.segment_id)]
    groups: dict[tuple[int, int], list[int]] = {}
    for s in present:
        if task is TaskKind.INSTANCE and not s.is_thing:
            continue
        if task is TaskKind.SEMANTIC or not s.is_thing:
            key = (s.class_id, -1)
        else:
            key = (s.class_id, s.segment_id)
        groups.setdefault(key, []).append(s.segment_id)
    targets = []
    for (class_id, _), ids in groups.items():
        ids = sorted(ids)
        targets.append(Target(class_id, np.isin(seg_map, ids), tuple(ids)))
    targets.sort(key=lambda t: (t.class_id, t.segment_ids[0]))
    return TaskGroundTruth(task, targets)


def semantic_map(label: PanopticLabel, ignore: int = -1) -> np.ndarray:
    """Per-pixel class ids; unlabeled pixels get ``ignore``."""
    out = np.full(label.segment_map.shape, ignore, dtype=np.int64)
    for s in label.segments:
        out[label.segment_map == s.segment_id] = s.class_id
    return out


# ---------------------------------------------------------------- PNG id packing


def decode_segment_png(rgb: np.ndarray) -> np.ndarray:
    rgb = np.asarray(rgb)
    if rgb.ndim != 3 or rgb.shape[2] != 3 or rgb.shape[0] == 0 or rgb.shape[1] == 0:
        raise ValueError(f"expected a non-empty H x W x 3 image, got {rgb.shape}")
    rgb = rgb.astype(np.int64)
    return rgb[..., 0] + 256 * rgb[..., 1] + 65536 * rgb[..., 2]


def encode_segment_png(segment_map: np.ndarray) -> np.ndarray:
    ids = np.asarray(segment_map, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= 1 << 24):
        raise OverflowError("segment ids must lie in [0, 2**24)")
    out = np.empty(ids.shape + (3,), dtype=np.uint8)
    out[..., 0] = ids % 256
    out[..., 1] = (ids // 256) % 256
    out[..., 2] = ids // 65536
    return out


def read_png(path: str | Path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))


def write_png(path: str | Path, rgb: np.ndarray) -> None:
    Image.fromarray(np.ascontiguousarray(rgb, dtype=np.uint8), mode="RGB").save(path, format="PNG")


# ---------------------------------------------------------------- dataset layout


@dataclass
class ImageRecord:
    file_name: str
    width: int
    height: int
    segments: list[Segment] = field(default_factory=list)
    confidences: list[float] | None = None


def format_meta(classes: ClassTable, records: Sequence[ImageRecord]) -> str:
    """Serialize the class table and per-image segment lists.

    One tab-separated record per line::

        taskseg-panoptic-meta  1
        class   <id> <name> thing|stuff
        image   <file> <width> <height>
        segment <file> <id> <class_id> thing|stuff [confidence]
    """
    lines = [f"{META_HEADER}\t{META_VERSION}"]
    for c in classes.entries:
        lines.append(f"class\t{c.class_id}\t{c.name}\t{'thing' if c.is_thing else 'stuff'}")
    for rec in records:
        lines.append(f"image\t{rec.file_name}\t{rec.width}\t{rec.height}")
        for i, s in enumerate(rec.segments):
            row = f"segment\t{rec.file_name}\t{s.segment_id}\t{s.class_id}\t{'thing' if s.is_thing else 'stuff'}"
            if rec.confidences is not None:
                row += f"\t{rec.confidences[i]:.6f}"
            lines.append(row)
    return "\n".join(lines) + "\n"


def parse_meta(text: str) -> tuple[ClassTable, list[ImageRecord]]:
    lines = [ln for ln in text.splitlines() if ln.strip()]
    if not lines or lines[0].split("\t")[0] != META_HEADER:
        raise ValidationError("metadata file lacks the panoptic-meta header")
    class_rows: list[tuple[int, str, bool]] = []
    records: dict[str, ImageRecord] = {}
    order: list[str] = []
    for n, line in enumerate(lines[1:], start=2):
        fields = line.split("\t")
        kind = fields[0]
        try:
            if kind == "class":
                class_rows.append((int(fields[1]), fields[2], _parse_kind(fields[3])))
            elif kind == "image":
                records[fields[1]] = ImageRecord(fields[1], int(fields[2]), int(fields[3]))
                order.append(fields[1])
            elif kind == "segment":
                rec = records[fields[1]]
                rec.segments.append(Segment(int(fields[2]), int(fields[3]), _parse_kind(fields[4])))
                if len(fields) > 5:
                    rec.confidences = (rec.confidences or []) + [float(fields[5])]
            else:
                raise ValidationError(f"line {n}: unknown record type {kind!r}")
        except (IndexError, KeyError, ValueError) as exc:
            if isinstance(exc, ValidationError):
                raise
            raise ValidationError(f"line {n}: malformed record {line!r}") from exc
    class_rows.sort()
    classes = ClassTable(tuple(ClassInfo(i, name, thing) for i, name, thing in class_rows))
    return classes, [records[name] for name in order]


def _parse_kind(text: str) -> bool:
    if text not in ("thing", "stuff"):
        raise ValidationError(f"expected 'thing' or 'stuff', got {text!r}")
    return text == "thing"


@dataclass
class Sample:
    name: str
    image: np.ndarray
    label: PanopticLabel


class PanopticDataset:
    """A directory with ``images/``, ``panoptic/`` and ``panoptic.meta``."""

    def __init__(self, root: str | Path):
        self.root = Path(root)
        meta_path = self.root / META_NAME
        self.classes, self.records = parse_meta(meta_path.read_text(encoding="utf-8"))

    def __len__(self) -> int:
        return len(self.records)

    def __getitem__(self, i: int) -> Sample:
        rec = self.records[i]
        image = read_png(self.root / "images" / rec.file_name)
        seg = decode_segment_png(read_png(self.root / "panoptic" / rec.file_name))
        label = PanopticLabel(seg, list(rec.segments))
        label.validate(self.classes)
        return Sample(Path(rec.file_name).stem, image, label)

    def __iter__(self):
        for i in range(len(self)):
            yield self[i]


def write_dataset(
    root: str | Path,
    classes: ClassTable,
    samples: Sequence[tuple[str, np.ndarray | None, PanopticLabel]],
    confidences: Sequence[Sequence[float]] | None = None,
    meta_name: str = META_NAME,
    map_dir: str = "panoptic",
) -> None:
    """Write (file name, image, label) triples in the dataset layout.

    Images may be None when only the label side is wanted (predictions).
    """
    root = Path(root)
    (root / map_dir).mkdir(parents=True, exist_ok=True)
    records = []
    for i, (file_name, image, label) in enumerate(samples):
        if image is not None:
            (root / "images").mkdir(parents=True, exist_ok=True)
            write_png(root / "images" / file_name, image)
        write_png(root / map_dir / file_name, encode_segment_png(label.segment_map))
        records.append(
            ImageRecord(
                file_name,
                label.width,
                label.height,
                list(label.segments),
                list(confidences[i]) if confidences is not None else None,
            )
        )
    (root / meta_name).write_text(format_meta(classes, records), encoding="utf-8")


def gt_to_label(gt: TaskGroundTruth, classes: ClassTable) -> PanopticLabel:
    """Pack a (non-overlapping) target set back into a segment map."""
    if not gt.targets:
        return PanopticLabel(np.zeros((0, 0), dtype=np.int64), [])
    seg = np.zeros(gt.targets[0].mask.shape, dtype=np.int64)
    segments = []
    for i, t in enumerate(gt.targets, start=1):
        seg[t.mask] = i
        segments.append(Segment(i, t.class_id, classes.is_thing(t.class_id)))
    return PanopticLabel(seg, segments)
