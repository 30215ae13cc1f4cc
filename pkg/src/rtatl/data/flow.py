"""Optical-flow targets: .flo I/O, providers and resolution changes."""
from __future__ import annotations

from pathlib import Path
from typing import Callable, Optional, Protocol

import cv2
import numpy as np

from .align import warp_image
from .types import DataError, FlowPair

FLO_MAGIC = np.float32(202021.25)


def write_flo(path, flow: np.ndarray) -> None:
    flow = np.asarray(flow, dtype=np.float32)
    if flow.ndim != 3 or flow.shape[2] != 2:
        raise ValueError(f"flow must be H x W x 2, got {flow.shape}")
    h, w = flow.shape[:2]
    with open(path, "wb") as f:
        f.write(FLO_MAGIC.tobytes())
        f.write(np.array([w, h], dtype="<i4").tobytes())
        f.write(flow.astype("<f4").tobytes())


def read_flo(path) -> np.ndarray:
    with open(path, "rb") as f:
        magic = np.frombuffer(f.read(4), dtype="<f4")
        if magic.size != 1 or magic[0] != FLO_MAGIC:
            raise DataError(f"{path}: bad .flo magic number")
        w, h = np.frombuffer(f.read(8), dtype="<i4")
        data = np.frombuffer(f.read(), dtype="<f4")
    if data.size != 2 * w * h:
        raise DataError(f"{path}: expected {2 * w * h} floats, found {data.size}")
    return data.reshape(h, w, 2).astype(np.float32)


class FlowProvider(Protocol):
    def __call__(self, frame_t: np.ndarray, frame_t3: np.ndarray) -> np.ndarray: ...


def _gray_u8(image: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float32)
    if image.ndim == 3:
        image = image.mean(axis=2)
    return np.clip(image * 255.0 + 0.5, 0, 255).astype(np.uint8)


def farneback_flow(frame_t: np.ndarray, frame_t3: np.ndarray) -> np.ndarray:
    """Dense flow from ``frame_t`` to ``frame_t3`` (stand-in for TV-L1)."""
    return cv2.calcOpticalFlowFarneback(
        _gray_u8(frame_t), _gray_u8(frame_t3), None,
        pyr_scale=0.5, levels=3, winsize=15, iterations=5,
        poly_n=5, poly_sigma=1.1, flags=cv2.OPTFLOW_FARNEBACK_GAUSSIAN,
    ).astype(np.float32)


def prepare_flow_target(frame_t: np.ndarray, frame_t3: np.ndarray,
                        transform_t: Optional[np.ndarray] = None,
                        aligned_size: Optional[int] = None,
                        flow_path=None,
                        provider: Optional[FlowProvider] = None,
                        pair_name: str = "") -> FlowPair:
    """Flow between a frame and the one ``flow_step`` later.

    Both frames are warped with the *earlier* frame's transform so that head
    motion is not re-aligned away. A precomputed ``.flo`` file wins over the
    provider.
    """
    if transform_t is not None:
        size = aligned_size or frame_t.shape[0]
        frame_t = warp_image(frame_t, transform_t, size)
        frame_t3 = warp_image(frame_t3, transform_t, size)
    if flow_path is not None and Path(flow_path).is_file():
        flow = read_flo(flow_path)
    elif provider is not None:
        flow = provider(frame_t, frame_t3)
    else:
        raise DataError(f"no flow for frame pair {pair_name or flow_path!s}: "
                        "file missing and no provider configured")
    if flow.shape[:2] != frame_t.shape[:2]:
        raise DataError(f"flow shape {flow.shape[:2]} != frame shape {frame_t.shape[:2]}")
    if not np.all(np.isfinite(flow)):
        raise DataError(f"non-finite flow for frame pair {pair_name}")
    return FlowPair(frame_t=frame_t, frame_t3=frame_t3, flow=flow)


def downsample_flow(flow, target_hw: tuple[int, int], scale: Optional[float] = None) -> np.ndarray:
    """Area-average ``flow`` to ``target_hw`` and rescale displacements.

    ``scale`` defaults to ``target / source`` per axis; flow magnitudes are
    measured in pixels of whatever grid they live on.
    """
    if isinstance(flow, FlowPair):
        flow = flow.flow
    flow = np.asarray(flow, dtype=np.float32)
    h, w = flow.shape[:2]
    th, tw = target_hw
    if h % th or w % tw:
        raise ValueError(f"target {target_hw} does not divide flow shape {(h, w)}")
    fy, fx = h // th, w // tw
    pooled = flow.reshape(th, fy, tw, fx, 2).mean(axis=(1, 3))
    if scale is None:
        factors = np.array([tw / w, th / h], dtype=np.float32)
    else:
        factors = np.array([scale, scale], dtype=np.float32)
    return pooled * factors
