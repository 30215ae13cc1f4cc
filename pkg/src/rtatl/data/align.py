"""Similarity-transform face alignment on eye centres.

Point coordinates follow the pixel-edge convention used throughout the
package: pixel ``j`` spans ``[j, j + 1)`` and has its centre at ``j + 0.5``.
"""
from __future__ import annotations

import cv2
import numpy as np

from .types import AlignmentError

# canonical eye centres as fractions of the aligned image side
CANONICAL_LEFT_EYE = (0.35, 0.42)
CANONICAL_RIGHT_EYE = (0.65, 0.42)


def eye_centers(landmarks: np.ndarray, left_idx, right_idx) -> tuple[np.ndarray, np.ndarray]:
    landmarks = np.asarray(landmarks, dtype=np.float64)
    return landmarks[list(left_idx)].mean(0), landmarks[list(right_idx)].mean(0)


def similarity_from_eyes(left_eye, right_eye, aligned_size: int) -> np.ndarray:
    """2x3 matrix mapping the given eye centres onto the canonical ones."""
    src_l = complex(*left_eye)
    src_r = complex(*right_eye)
    if abs(src_r - src_l) < 1e-6:
        raise AlignmentError("degenerate landmarks: eye centres coincide")
    dst_l = complex(*CANONICAL_LEFT_EYE) * aligned_size
    dst_r = complex(*CANONICAL_RIGHT_EYE) * aligned_size
    # z -> a z + b  with a = s * e^{i theta}
    a = (dst_r - dst_l) / (src_r - src_l)
    b = dst_l - a * src_l
    return np.array([[a.real, -a.imag, b.real],
                     [a.imag, a.real, b.imag]], dtype=np.float64)


def transform_points(points: np.ndarray, transform: np.ndarray) -> np.ndarray:
    points = np.asarray(points, dtype=np.float64)
    return points @ transform[:, :2].T + transform[:, 2]


def to_pixel_center_convention(transform: np.ndarray) -> np.ndarray:
    """Rewrite an edge-convention affine map for OpenCV's centre convention."""
    out = np.array(transform, dtype=np.float64)
    out[:, 2] = transform[:, :2] @ np.array([0.5, 0.5]) + transform[:, 2] - 0.5
    return out


def warp_image(image: np.ndarray, transform: np.ndarray, size: int) -> np.ndarray:
    return cv2.warpAffine(np.asarray(image, dtype=np.float32),
                          to_pixel_center_convention(transform), (size, size),
                          flags=cv2.INTER_LINEAR, borderMode=cv2.BORDER_REPLICATE)


def align_face(raw_image: np.ndarray, landmarks: np.ndarray, aligned_size: int,
               left_eye=tuple(range(36, 42)), right_eye=tuple(range(42, 48))):
    """Warp ``raw_image`` so the eye centres land on canonical positions.

    Returns ``(aligned_image, transform, aligned_landmarks)``; ``transform`` is
    the 2x3 similarity matrix (rotation, uniform scale, translation).
    """
    landmarks = np.asarray(landmarks, dtype=np.float64)
    if max(max(left_eye), max(right_eye)) >= len(landmarks):
        # fall back to the two first points as explicit eye centres
        if len(landmarks) < 2:
            raise AlignmentError("need at least two landmark anchor points")
        le, re = landmarks[0], landmarks[1]
    else:
        le, re = eye_centers(landmarks, left_eye, right_eye)
    transform = similarity_from_eyes(le, re, aligned_size)
    image = warp_image(raw_image, transform, aligned_size)
    return image, transform, transform_points(landmarks, transform)
