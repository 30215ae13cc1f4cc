"""Deterministic synthetic face videos for desk-scale training and tests.

Each face is a shaded ellipse with eyes, brows, nose and mouth drawn from a
68-point landmark template. Every AU owns one short dark stroke per side,
confined to that side's RoI box; an active AU shifts its stroke along the
stroke normal. Frame-to-frame flow is therefore known exactly: it equals the
stroke displacement on stroke pixels and zero elsewhere.
"""
from __future__ import annotations

from dataclasses import dataclass

import cv2
import numpy as np

from ..config import AUSpec
from .align import CANONICAL_LEFT_EYE, CANONICAL_RIGHT_EYE
from .roi import au_boxes, compute_au_centers
from .types import Sample

STROKE_SIGMA = 1.0
STROKE_DARKNESS = 0.7
FLOW_ALPHA = 0.3


def _template(size: int, mouth_w: float = 1.0, brow_lift: float = 0.0) -> np.ndarray:
    """Symmetric dlib-68 landmark set in pixel-edge coordinates."""
    pts = np.zeros((68, 2))
    phi = np.pi - np.arange(17) * np.pi / 16
    pts[:17] = np.stack([0.5 + 0.35 * np.cos(phi), 0.45 + 0.5 * np.sin(phi)], 1)
    bx = np.linspace(0.24, 0.46, 5)
    pts[17:22] = np.stack([bx, 0.335 - brow_lift - 0.02 * np.sin(np.linspace(0.3, 2.8, 5))], 1)
    pts[27:31] = np.stack([np.full(4, 0.5), np.linspace(0.45, 0.58, 4)], 1)
    pts[31:36] = np.stack([np.array([0.44, 0.47, 0.5, 0.53, 0.56]), np.array([0.61, 0.62, 0.625, 0.62, 0.61])], 1)
    (cx, cy), ew, eh = CANONICAL_LEFT_EYE, 0.055, 0.02
    pts[36:42] = [(cx - ew, cy), (cx - ew / 3, cy - eh), (cx + ew / 3, cy - eh),
                  (cx + ew, cy), (cx + ew / 3, cy + eh), (cx - ew / 3, cy + eh)]
    mw = 0.12 * mouth_w
    pts[48:55] = np.stack([0.5 + mw * np.array([-1, -0.67, -0.33, 0, 0.33, 0.67, 1]),
                           [0.74, 0.718, 0.707, 0.712, 0.707, 0.718, 0.74]], 1)
    pts[55:60] = np.stack([0.5 + mw * np.array([0.67, 0.33, 0, -0.33, -0.67]),
                           [0.768, 0.783, 0.788, 0.783, 0.768]], 1)
    pts[60:65] = np.stack([0.5 + mw * np.array([-0.83, -0.42, 0, 0.42, 0.83]),
                           [0.74, 0.732, 0.733, 0.732, 0.74]], 1)
    pts[65:68] = np.stack([0.5 + mw * np.array([0.42, 0, -0.42]), [0.75, 0.753, 0.75]], 1)
    # right brow and right eye mirror the left ones
    pts[22:27] = pts[21:16:-1] * [-1, 1] + [1, 0]
    pts[42:48] = pts[[39, 38, 37, 36, 41, 40]] * [-1, 1] + [1, 0]
    assert np.allclose(pts[42:48].mean(0), CANONICAL_RIGHT_EYE)
    return pts * size


@dataclass(frozen=True)
class Stroke:
    center: np.ndarray      # (x, y) at rest
    direction: np.ndarray   # unit vector along the stroke
    shift: np.ndarray       # displacement when the AU is active
    half_length: float
    box: tuple[int, int, int, int]


def au_strokes(landmarks: np.ndarray, spec: AUSpec, size: int) -> list[tuple[Stroke, Stroke]]:
    centers = compute_au_centers(landmarks, spec, size)
    boxes = au_boxes(centers, spec.patch_size, size)
    s = spec.patch_size
    out = []
    for i in range(spec.N):
        theta = np.pi * (i + 0.5) / spec.N
        direction = np.array([np.cos(theta), np.sin(theta)])
        normal = np.array([-direction[1], direction[0]])
        ang = 2 * np.pi * i / spec.N
        offset = 0.08 * s * np.array([np.cos(ang), np.sin(ang)])
        shift = 0.14 * s * normal * (1 if i % 2 == 0 else -1)
        pair = []
        for side in range(2):
            m = np.array([-1.0, 1.0]) if side == 1 else np.array([1.0, 1.0])
            box = boxes[i][side]
            box_center = np.array([(box[0] + box[2]) / 2, (box[1] + box[3]) / 2])
            pair.append(Stroke(center=box_center + offset * m, direction=direction * m,
                               shift=shift * m, half_length=0.16 * s, box=box))
        out.append(tuple(pair))
    return out


def stroke_alpha(stroke: Stroke, active: bool, size: int) -> np.ndarray:
    """Soft stroke coverage on the full image grid, zero outside its box."""
    alpha = np.zeros((size, size))
    x0, y0, x1, y1 = stroke.box
    ys, xs = np.mgrid[y0:y1, x0:x1] + 0.5
    c = stroke.center + (stroke.shift if active else 0.0)
    rel = np.stack([xs - c[0], ys - c[1]], -1)
    t = np.clip(rel @ stroke.direction, -stroke.half_length, stroke.half_length)
    d2 = ((rel - t[..., None] * stroke.direction) ** 2).sum(-1)
    alpha[y0:y1, x0:x1] = np.exp(-d2 / (2 * STROKE_SIGMA ** 2))
    return alpha


def _soft_ellipse(size, center, radii, edge=1.0):
    ys, xs = np.mgrid[0:size, 0:size] + 0.5
    r = np.sqrt(((xs - center[0]) / radii[0]) ** 2 + ((ys - center[1]) / radii[1]) ** 2)
    return 1.0 / (1.0 + np.exp((r - 1.0) * min(radii) / edge))


@dataclass(frozen=True)
class Face:
    """Static appearance of one synthetic subject."""
    size: int
    landmarks: np.ndarray
    base: np.ndarray
    strokes: tuple

    def render(self, active: np.ndarray, skip: int | None = None) -> np.ndarray:
        """Image for the AU activation vector; ``skip`` omits one AU's strokes."""
        shade = np.ones((self.size, self.size))
        for i, pair in enumerate(self.strokes):
            if i == skip:
                continue
            for stroke in pair:
                shade *= 1.0 - STROKE_DARKNESS * stroke_alpha(stroke, bool(active[i]), self.size)
        return (self.base * shade[..., None]).astype(np.float32)

    def flow(self, active_t: np.ndarray, active_t3: np.ndarray) -> np.ndarray:
        flow = np.zeros((self.size, self.size, 2), dtype=np.float32)
        best = np.full((self.size, self.size), FLOW_ALPHA)
        for i, pair in enumerate(self.strokes):
            delta = int(active_t3[i]) - int(active_t[i])
            for stroke in pair:
                alpha = stroke_alpha(stroke, bool(active_t[i]), self.size)
                hit = alpha > best
                best = np.where(hit, alpha, best)
                flow[hit] = stroke.shift * delta
        return flow


def make_face(rng: np.random.Generator, spec: AUSpec, size: int) -> Face:
    lm = _template(size, mouth_w=rng.uniform(0.92, 1.08), brow_lift=rng.uniform(-0.01, 0.01))
    skin = np.array([0.85, 0.68, 0.58]) * rng.uniform(0.8, 1.05) + rng.uniform(-0.04, 0.04, 3)
    background = rng.uniform(0.2, 0.5, 3)
    face = _soft_ellipse(size, (0.5 * size, 0.5 * size), (0.36 * size, 0.47 * size))
    img = background * (1 - face[..., None]) + skin * face[..., None]
    # static low-frequency texture
    coarse = rng.normal(0, 0.03, (6, 6)).astype(np.float32)
    img = img + cv2.resize(coarse, (size, size), interpolation=cv2.INTER_CUBIC)[..., None]
    dark = np.zeros((size, size))
    for eye in (range(36, 42), range(42, 48)):
        c = lm[list(eye)].mean(0)
        dark = np.maximum(dark, 0.8 * _soft_ellipse(size, c, (0.05 * size, 0.022 * size)))
    for brow in (range(17, 22), range(22, 27)):
        c = lm[list(brow)].mean(0)
        dark = np.maximum(dark, 0.35 * _soft_ellipse(size, c, (0.11 * size, 0.012 * size)))
    dark = np.maximum(dark, 0.25 * _soft_ellipse(size, lm[30], (0.015 * size, 0.08 * size)))
    mouth = lm[48:60].mean(0)
    dark = np.maximum(dark, 0.5 * _soft_ellipse(size, mouth, (np.ptp(lm[48:55, 0]) / 2, 0.02 * size)))
    base = np.clip(img * (1 - dark[..., None]), 0.0, 1.0)
    return Face(size=size, landmarks=lm, base=base, strokes=tuple(au_strokes(lm, spec, size)))


def synth_dataset(seed: int, n_subjects: int, frames_per_subject: int, spec: AUSpec,
                  size: int = 200, flow_step: int = 3, labeled: bool = True,
                  p_on: float = 0.35, p_switch: float = 0.3) -> list[Sample]:
    """Generate ``n_subjects x frames_per_subject`` aligned samples.

    Labeled video frames carry labels and, where frame ``t + flow_step``
    exists, the exact flow target. Unlabeled samples are still images: no
    labels, no flow.
    """
    rng = np.random.default_rng(seed)
    samples = []
    activations = []
    for subject in range(n_subjects):
        face = make_face(rng, spec, size)
        act = np.zeros((frames_per_subject, spec.N), dtype=np.int64)
        act[0] = rng.random(spec.N) < p_on
        for t in range(1, frames_per_subject):
            switch = rng.random(spec.N) < p_switch
            act[t] = np.where(switch, rng.random(spec.N) < p_on, act[t - 1])
        activations.append((subject, face, act))
    if labeled:
        # every AU appears at least once so per-AU F1 is defined on the set
        total = np.concatenate([a for _, _, a in activations])
        for j in np.flatnonzero(total.sum(0) == 0):
            s_idx = int(rng.integers(n_subjects))
            activations[s_idx][2][int(rng.integers(frames_per_subject)), j] = 1
    for subject, face, act in activations:
        for t in range(frames_per_subject):
            flow = None
            if labeled and t + flow_step < frames_per_subject:
                flow = face.flow(act[t], act[t + flow_step])
            samples.append(Sample(
                image=face.render(act[t]),
                subject_id=f"S{subject:03d}",
                labels=act[t].copy() if labeled else None,
                landmarks=face.landmarks.copy(),
                flow_target=flow,
                frame_index=t,
            ))
    return samples
