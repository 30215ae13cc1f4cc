"""Random crop + horizontal flip, applied consistently to every Sample field."""
from __future__ import annotations

from dataclasses import replace
from typing import Optional, Sequence

import numpy as np

from .types import MaskDescriptor, Sample


def _crop_limits(sample: Sample, size: int) -> tuple[tuple[int, int], tuple[int, int]]:
    h, w = sample.image.shape[:2]
    lo_x, hi_x, lo_y, hi_y = 0, w - size, 0, h - size
    if sample.mask is not None:
        # keep erased boxes inside the crop so their patches stay meaningful
        for x0, y0, x1, y1 in sample.mask.boxes:
            lo_x, hi_x = max(lo_x, x1 - size), min(hi_x, x0)
            lo_y, hi_y = max(lo_y, y1 - size), min(hi_y, y0)
        if lo_x > hi_x or lo_y > hi_y:
            raise ValueError("erased RoIs do not fit in a single crop window")
    return (lo_x, hi_x), (lo_y, hi_y)


def crop(sample: Sample, x0: int, y0: int, size: int) -> Sample:
    h, w = sample.image.shape[:2]
    if not (0 <= x0 <= w - size and 0 <= y0 <= h - size):
        raise ValueError(f"crop window ({x0}, {y0}, {size}) outside {w}x{h} image")
    out = sample.copy()
    out.image = sample.image[y0:y0 + size, x0:x0 + size].copy()
    if sample.landmarks is not None:
        out.landmarks = sample.landmarks - np.array([x0, y0], dtype=np.float64)
    if sample.flow_target is not None:
        out.flow_target = sample.flow_target[y0:y0 + size, x0:x0 + size].copy()
    if sample.mask is not None:
        boxes = tuple((bx0 - x0, by0 - y0, bx1 - x0, by1 - y0)
                      for bx0, by0, bx1, by1 in sample.mask.boxes)
        if any(b[0] < 0 or b[1] < 0 or b[2] > size or b[3] > size for b in boxes):
            raise ValueError("crop window cuts through an erased RoI")
        out.mask = replace(sample.mask, boxes=boxes)
    return out


def hflip(sample: Sample, mirror: Optional[Sequence[int]] = None) -> Sample:
    """Mirror a sample left-right.

    With a landmark ``mirror`` permutation, landmark indices keep their
    image-side meaning and the left/right erased boxes swap roles.
    """
    w = sample.image.shape[1]
    out = sample.copy()
    out.image = sample.image[:, ::-1].copy()
    if sample.landmarks is not None:
        lm = sample.landmarks.copy()
        lm[:, 0] = w - lm[:, 0]
        if mirror is not None:
            lm = lm[list(mirror)]
        out.landmarks = lm
    if sample.flow_target is not None:
        flow = sample.flow_target[:, ::-1].copy()
        flow[..., 0] = -flow[..., 0]
        out.flow_target = flow
    if sample.mask is not None:
        boxes = [(w - x1, y0, w - x0, y1) for x0, y0, x1, y1 in sample.mask.boxes]
        patches = [p[:, ::-1].copy() for p in sample.mask.patches]
        if mirror is not None:
            boxes, patches = boxes[::-1], patches[::-1]
        out.mask = MaskDescriptor(
            au_index=sample.mask.au_index,
            boxes=(boxes[0], boxes[1]),
            patches=(patches[0], patches[1]),
            excluded_au_indices=sample.mask.excluded_au_indices,
        )
    return out


def augment(sample: Sample, rng: Optional[np.random.Generator], input_size: int,
            train: bool = True, mirror: Optional[Sequence[int]] = None) -> Sample:
    """Random crop to ``input_size`` plus a coin-flip mirror; centre crop at test time."""
    (lo_x, hi_x), (lo_y, hi_y) = _crop_limits(sample, input_size)
    if train:
        x0 = int(rng.integers(lo_x, hi_x + 1))
        y0 = int(rng.integers(lo_y, hi_y + 1))
    else:
        h, w = sample.image.shape[:2]
        x0, y0 = (w - input_size) // 2, (h - input_size) // 2
    out = crop(sample, x0, y0, input_size)
    if train and rng.random() < 0.5:
        out = hflip(out, mirror)
    return out
