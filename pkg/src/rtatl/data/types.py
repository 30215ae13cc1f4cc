from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


class DataError(RuntimeError):
    pass


class AlignmentError(DataError):
    pass


@dataclass
class MaskDescriptor:
    """Erased symmetric RoI pair of one AU.

    ``boxes`` are integer half-open ``(x0, y0, x1, y1)`` boxes, left then right;
    ``patches`` hold the original pixels (s x s x 3) of those boxes.
    """
    au_index: int
    boxes: tuple[tuple[int, int, int, int], tuple[int, int, int, int]]
    patches: tuple[np.ndarray, np.ndarray]
    excluded_au_indices: frozenset[int]


@dataclass
class FlowPair:
    frame_t: np.ndarray
    frame_t3: np.ndarray
    flow: np.ndarray  # H x W x 2, (u, v) in pixels


@dataclass
class Sample:
    image: np.ndarray                        # H x W x 3 float32 in [0, 1]
    subject_id: str
    labels: Optional[np.ndarray] = None      # (N,) in {0, 1}
    landmarks: Optional[np.ndarray] = None   # K x 2, image coordinates
    flow_target: Optional[np.ndarray] = None # H x W x 2
    mask: Optional[MaskDescriptor] = None
    frame_index: Optional[int] = None

    @property
    def is_labeled(self) -> bool:
        return self.labels is not None

    def copy(self) -> "Sample":
        return Sample(
            image=self.image.copy(),
            subject_id=self.subject_id,
            labels=None if self.labels is None else self.labels.copy(),
            landmarks=None if self.landmarks is None else self.landmarks.copy(),
            flow_target=None if self.flow_target is None else self.flow_target.copy(),
            mask=self.mask,
            frame_index=self.frame_index,
        )
