"""Input checks shared by the estimator and the harness."""

from __future__ import annotations

from typing import Sequence

import numpy as np

from .annotations import ClassTable, PanopticLabel, ValidationError


def check_images(X, multiple: int = 32) -> list[np.ndarray]:
    """Accept an (n, H, W, 3) array or a sequence of (H, W, 3) arrays."""
    if isinstance(X, np.ndarray) and X.ndim == 3:
        X = X[None]
    images = [np.asarray(x) for x in X]
    if not images:
        raise ValueError("no images given")
    for i, img in enumerate(images):
        if img.ndim != 3 or img.shape[2] != 3:
            raise ValueError(f"image {i} must be H x W x 3, got shape {img.shape}")
        if img.shape[0] % multiple or img.shape[1] % multiple:
            raise ValueError(f"image {i} extents {img.shape[:2]} must be divisible by {multiple}")
        if img.dtype != np.uint8 and not np.all(np.isfinite(img)):
            raise ValueError(f"image {i} has non-finite values")
    return images


def check_labels(y: Sequence[PanopticLabel], images: Sequence[np.ndarray], classes: ClassTable) -> list[PanopticLabel]:
    labels = list(y)
    if len(labels) != len(images):
        raise ValueError(f"{len(images)} images but {len(labels)} labels")
    for i, (label, img) in enumerate(zip(labels, images)):
        if not isinstance(label, PanopticLabel):
            raise TypeError(f"label {i} is {type(label).__name__}, expected PanopticLabel")
        if label.segment_map.shape != img.shape[:2]:
            raise ValidationError(f"label {i} is {label.segment_map.shape}, image is {img.shape[:2]}")
        label.validate(classes)
    return labels
