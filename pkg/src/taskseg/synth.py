"""Synthetic panoptic scenes: coloured thing shapes over horizontal stuff bands.

Each class has a base colour, so colour carries the class signal and the
shape extent carries the instance signal.
"""

from __future__ import annotations

import zlib
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .annotations import ClassTable, PanopticLabel, Segment, write_dataset

DEFAULT_CLASSES = ClassTable.from_pairs(
    [("car", True), ("person", True), ("dog", True), ("sky", False), ("road", False), ("grass", False)]
)

_PALETTE = {
    "car": (220, 40, 40),
    "person": (40, 60, 230),
    "dog": (235, 200, 30),
    "sky": (140, 200, 250),
    "road": (110, 110, 110),
    "grass": (60, 170, 70),
}


@dataclass
class SyntheticScene:
    image: np.ndarray
    label: PanopticLabel


def class_colors(classes: ClassTable) -> np.ndarray:
    """Fixed palette for known names; hashed colours for the rest."""
    colors = []
    for c in classes.entries:
        if c.name in _PALETTE:
            colors.append(_PALETTE[c.name])
        else:
            h = np.random.default_rng(zlib.crc32(c.name.encode())).integers(30, 230, 3)
            colors.append(tuple(int(v) for v in h))
    return np.array(colors, dtype=np.float64)


def _shape_mask(rng: np.random.Generator, h: int, w: int) -> np.ndarray:
    yy, xx = np.mgrid[0:h, 0:w]
    scale = min(h, w) / 64.0
    if rng.random() < 0.5:
        r = rng.uniform(6, 12) * scale
        cy, cx = rng.uniform(r, h - r), rng.uniform(r, w - r)
        return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    hh, ww = rng.uniform(10, 24, 2) * scale
    y0, x0 = rng.uniform(0, h - hh), rng.uniform(0, w - ww)
    return (yy >= y0) & (yy < y0 + hh) & (xx >= x0) & (xx < x0 + ww)


def generate_scene(rng: np.random.Generator, classes: ClassTable, height: int = 64, width: int = 64,
                   thing_proportions: Sequence[float] | None = None, noise: float = 12.0,
                   min_visible: float = 0.6) -> SyntheticScene:
    things = classes.thing_ids
    stuff = classes.stuff_ids
    if len(things) < 2 or len(stuff) < 1:
        raise ValueError("need at least two thing classes and one stuff class")
    props = np.full(len(things), 1.0 / len(things)) if thing_proportions is None else np.asarray(thing_proportions, float)
    props = props / props.sum()

    seg = np.zeros((height, width), dtype=np.int64)
    segments: list[Segment] = []
    n_bands = int(rng.integers(1, min(3, len(stuff)) + 1))
    band_classes = rng.choice(stuff, size=n_bands, replace=False)
    cuts = np.sort(rng.choice(np.arange(8, height - 7), size=n_bands - 1, replace=False)) if n_bands > 1 else []
    edges = [0, *[int(c) for c in cuts], height]
    for i, cls in enumerate(band_classes):
        sid = len(segments) + 1
        seg[edges[i] : edges[i + 1]] = sid
        segments.append(Segment(sid, int(cls), False))

    n_things = int(rng.integers(1, 5))
    placed: list[tuple[int, np.ndarray]] = []
    for _ in range(n_things):
        cls = int(things[rng.choice(len(things), p=props)])
        for _attempt in range(20):
            shape = _shape_mask(rng, height, width)
            ok = True
            for _, other in placed:
                remaining = other & ~shape
                if remaining.sum() < min_visible * other.sum():
                    ok = False
                    break
            if ok:
                break
        else:
            continue
        placed = [(sid, m & ~shape) for sid, m in placed]
        sid = len(segments) + 1
        placed.append((sid, shape))
        segments.append(Segment(sid, cls, True))
    for sid, m in placed:
        seg[m] = sid

    present = set(np.unique(seg).tolist())
    segments = [s for s in segments if s.segment_id in present]

    colors = class_colors(classes)
    class_of = np.zeros(seg.max() + 1, dtype=np.int64)
    for s in segments:
        class_of[s.segment_id] = s.class_id
    image = colors[class_of[seg]] + rng.normal(0.0, noise, (height, width, 3))
    image = np.clip(np.rint(image), 0, 255).astype(np.uint8)
    return SyntheticScene(image, PanopticLabel(seg, segments))


def generate_scenes(seed: int, count: int, height: int = 64, width: int = 64,
                    classes: ClassTable = DEFAULT_CLASSES, **kwargs) -> list[SyntheticScene]:
    rng = np.random.default_rng(seed)
    return [generate_scene(rng, classes, height, width, **kwargs) for _ in range(count)]


def generate_synthetic(seed: int, count: int, height: int, width: int, out_dir: str | Path,
                       classes: ClassTable = DEFAULT_CLASSES, **kwargs) -> Path:
    """Write ``count`` scenes in the dataset layout under ``out_dir``."""
    out_dir = Path(out_dir)
    scenes = generate_scenes(seed, count, height, width, classes, **kwargs)
    write_dataset(out_dir, classes, [(f"scene_{i:04d}.png", s.image, s.label) for i, s in enumerate(scenes)])
    return out_dir
