"""PNG figures: flow channels, inpainting grids, indicator similarity heatmaps."""
from __future__ import annotations

import csv
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np


def flow_to_gray(channel: np.ndarray) -> np.ndarray:
    """Signed displacement -> uint8 with zero at mid-gray.

    Scaling is per image: the largest magnitude maps to 0 or 255.
    """
    peak = float(np.abs(channel).max())
    scaled = 127.5 + (127.5 * channel / peak if peak > 0 else 0.0 * channel)
    return np.clip(np.round(scaled), 0, 255).astype(np.uint8)


def _upscale(img: np.ndarray, size: int) -> np.ndarray:
    return cv2.resize(img, (size, size), interpolation=cv2.INTER_NEAREST)


def _grid(rows: Sequence[Sequence[np.ndarray]], pad: int = 4, fill: int = 255) -> np.ndarray:
    h, w = rows[0][0].shape[:2]
    chans = rows[0][0].shape[2:] or ()
    n_cols = max(len(r) for r in rows)
    out = np.full((len(rows) * (h + pad) + pad, n_cols * (w + pad) + pad, *chans), fill, np.uint8)
    for i, row in enumerate(rows):
        for j, tile in enumerate(row):
            y, x = pad + i * (h + pad), pad + j * (w + pad)
            out[y:y + h, x:x + w] = tile
    return out


def flow_figure(pairs: Sequence[tuple[np.ndarray, np.ndarray]], tile: int = 96) -> np.ndarray:
    """Two rows per sample (target, then prediction), each holding I_x | I_y."""
    rows = []
    for target, pred in pairs:
        for flow in (target, pred):
            rows.append([_upscale(flow_to_gray(flow[..., c]), tile) for c in (0, 1)])
    return _grid(rows)


def to_u8(image: np.ndarray) -> np.ndarray:
    return np.clip(np.round(image * 255.0), 0, 255).astype(np.uint8)


def inpaint_figure(masked: Sequence[np.ndarray], original: Sequence[np.ndarray],
                   recovered: Sequence[np.ndarray]) -> np.ndarray:
    """Rows: masked input, original, recovered. One column per sample."""
    if not len(masked) == len(original) == len(recovered):
        raise ValueError("masked, original and recovered need one image per sample each")
    return _grid([[to_u8(x) for x in row] for row in (masked, original, recovered)])


def similarity_heatmap(sim: np.ndarray, cell: int = 24) -> np.ndarray:
    """Cosine similarities in [-1, 1] -> grayscale, 1 at full white."""
    sim = np.asarray(sim, dtype=np.float64)
    if sim.ndim != 2 or sim.shape[0] != sim.shape[1]:
        raise ValueError(f"expected a square matrix, got {sim.shape}")
    gray = np.clip(np.round((sim + 1.0) * 127.5), 0, 255).astype(np.uint8)
    return np.kron(gray, np.ones((cell, cell), np.uint8))


def save_png(path, image: np.ndarray) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if image.ndim == 3:
        image = cv2.cvtColor(image, cv2.COLOR_RGB2BGR)
    if not cv2.imwrite(str(path), image):
        raise OSError(f"cannot write {path}")
    return path


def write_indicator_csv(path, indicators: np.ndarray, au_ids: Sequence[int]) -> None:
    """One column per AU, one row per embedding dimension."""
    indicators = np.asarray(indicators)
    if indicators.shape[1] != len(au_ids):
        raise ValueError(f"{indicators.shape[1]} indicator columns for {len(au_ids)} AUs")
    with Path(path).open("w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([f"AU{a}" for a in au_ids])
        for row in indicators:
            w.writerow([repr(float(v)) for v in row])


def read_indicator_csv(path) -> tuple[np.ndarray, list[int]]:
    with Path(path).open(newline="") as fh:
        rows = list(csv.reader(fh))
    au_ids = [int(h.removeprefix("AU")) for h in rows[0]]
    return np.array([[float(v) for v in r] for r in rows[1:]]), au_ids
