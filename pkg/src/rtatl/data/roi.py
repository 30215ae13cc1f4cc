"""AU RoI geometry and RoI erasure for the inpainting task."""
from __future__ import annotations

import numpy as np

from ..config import AUSpec
from .align import eye_centers
from .types import MaskDescriptor, Sample

FILL_VALUE = 1.0


def half_interocular(landmarks: np.ndarray, spec: AUSpec) -> float:
    le, re = eye_centers(landmarks, spec.layout["left_eye"], spec.layout["right_eye"])
    return float(np.linalg.norm(re - le)) / 2.0


def compute_au_centers(landmarks: np.ndarray, spec: AUSpec, image_size: int) -> np.ndarray:
    """Left/right RoI centres per AU, shape ``(N, 2, 2)`` as (x, y).

    Centres are clamped so that the ``s x s`` box lies inside the image.
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    unit = half_interocular(landmarks, spec)
    centers = np.empty((spec.N, 2, 2), dtype=np.float64)
    for i, pair in enumerate(spec.roi_rules):
        for side, rule in enumerate(pair):
            centers[i, side] = landmarks[rule.landmark] + unit * np.array([rule.dx, rule.dy])
    half = spec.patch_size / 2.0
    return np.clip(centers, half, image_size - half)


def box_from_center(center, size: int, image_size: int) -> tuple[int, int, int, int]:
    x0 = int(np.clip(np.floor(center[0] - size / 2.0 + 0.5), 0, image_size - size))
    y0 = int(np.clip(np.floor(center[1] - size / 2.0 + 0.5), 0, image_size - size))
    return (x0, y0, x0 + size, y0 + size)


def au_boxes(centers: np.ndarray, size: int, image_size: int) -> list[tuple[tuple, tuple]]:
    return [(box_from_center(c[0], size, image_size), box_from_center(c[1], size, image_size))
            for c in centers]


def box_intersection(a, b) -> int:
    w = min(a[2], b[2]) - max(a[0], b[0])
    h = min(a[3], b[3]) - max(a[1], b[1])
    return max(w, 0) * max(h, 0)


def overlapping_aus(boxes: list[tuple[tuple, tuple]], au_index: int) -> frozenset[int]:
    """AUs whose RoI boxes share any pixel with the boxes of ``au_index``."""
    erased = boxes[au_index]
    hit = {au_index}
    for j, pair in enumerate(boxes):
        if any(box_intersection(a, b) > 0 for a in pair for b in erased):
            hit.add(j)
    return frozenset(hit)


def apply_roi_mask(sample: Sample, spec: AUSpec, rng: np.random.Generator,
                   au_index: int | None = None) -> Sample:
    """Erase the symmetric RoI pair of a random AU with white.

    The returned sample carries a :class:`MaskDescriptor` with the original
    patches and the AUs whose evidence was (partly) removed.
    """
    if sample.landmarks is None:
        raise ValueError("RoI masking requires landmarks")
    size = sample.image.shape[0]
    if au_index is None:
        au_index = int(rng.integers(spec.N))
    centers = compute_au_centers(sample.landmarks, spec, size)
    boxes = au_boxes(centers, spec.patch_size, size)
    out = sample.copy()
    patches = []
    for x0, y0, x1, y1 in boxes[au_index]:
        patches.append(sample.image[y0:y1, x0:x1].copy())
    for x0, y0, x1, y1 in boxes[au_index]:
        out.image[y0:y1, x0:x1] = FILL_VALUE
    out.mask = MaskDescriptor(
        au_index=au_index,
        boxes=boxes[au_index],
        patches=(patches[0], patches[1]),
        excluded_au_indices=overlapping_aus(boxes, au_index),
    )
    return out


def restore_patches(image: np.ndarray, mask: MaskDescriptor) -> np.ndarray:
    out = image.copy()
    # right first, left last: where both boxes overlap the left patch wins,
    # and both hold the same original pixels anyway
    for (x0, y0, x1, y1), patch in reversed(list(zip(mask.boxes, mask.patches))):
        out[y0:y1, x0:x1] = patch
    return out
