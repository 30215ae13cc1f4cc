"""Collate augmented Samples into the tensors the network consumes."""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np
import torch

from ..config import AUSpec
from .flow import downsample_flow
from .roi import compute_au_centers
from .types import Sample


@dataclass
class Batch:
    images: torch.Tensor      # B x 3 x I x I, erased RoIs filled
    intact: torch.Tensor      # B x 3 x I x I, before erasure
    labels: torch.Tensor      # B x N (zeros where unlabeled)
    labeled: torch.Tensor     # B bool
    centers: torch.Tensor     # B x N x 2 x 2
    flow: torch.Tensor        # B x 2 x h x w (zeros where absent)
    has_flow: torch.Tensor    # B bool
    masked: torch.Tensor      # B bool
    mask_au: torch.Tensor     # B long, -1 where not masked
    excluded: torch.Tensor    # B x N bool
    patches: torch.Tensor     # B x 2 x 3 x s x s original pixels of erased boxes

    def __len__(self) -> int:
        return self.images.shape[0]

    def to(self, dtype=None, device=None) -> "Batch":
        out = {}
        for f in fields(self):
            t = getattr(self, f.name)
            if t.is_floating_point():
                t = t.to(device=device, dtype=dtype or t.dtype)
            else:
                t = t.to(device=device)
            out[f.name] = t
        return Batch(**out)


def _chw(image: np.ndarray) -> torch.Tensor:
    return torch.from_numpy(np.ascontiguousarray(image.transpose(2, 0, 1))).float()


def collate(samples: list[Sample], spec: AUSpec, intact: list[np.ndarray] | None = None,
            flow_size: int | None = None) -> Batch:
    """Stack samples that are already at network input size."""
    b, n, s = len(samples), spec.N, spec.patch_size
    size = samples[0].image.shape[0]
    flow_size = flow_size or size // 8
    images = torch.stack([_chw(x.image) for x in samples])
    originals = images.clone() if intact is None else torch.stack([_chw(im) for im in intact])
    labels = torch.zeros(b, n)
    labeled = torch.zeros(b, dtype=torch.bool)
    centers = torch.zeros(b, n, 2, 2)
    flow = torch.zeros(b, 2, flow_size, flow_size)
    has_flow = torch.zeros(b, dtype=torch.bool)
    masked = torch.zeros(b, dtype=torch.bool)
    mask_au = torch.full((b,), -1, dtype=torch.long)
    excluded = torch.zeros(b, n, dtype=torch.bool)
    patches = torch.zeros(b, 2, 3, s, s)
    for i, x in enumerate(samples):
        if x.image.shape[:2] != (size, size):
            raise ValueError(f"sample {i} has shape {x.image.shape[:2]}, expected {(size, size)}")
        if x.labels is not None:
            labels[i] = torch.as_tensor(np.asarray(x.labels, dtype=np.float32))
            labeled[i] = True
        if x.landmarks is None:
            raise ValueError(f"sample {i} ({x.subject_id}) has no landmarks")
        centers[i] = torch.from_numpy(compute_au_centers(x.landmarks, spec, size))
        if x.flow_target is not None:
            ds = downsample_flow(x.flow_target, (flow_size, flow_size))
            flow[i] = torch.from_numpy(ds.transpose(2, 0, 1).copy())
            has_flow[i] = True
        if x.mask is not None:
            masked[i] = True
            mask_au[i] = x.mask.au_index
            excluded[i, list(x.mask.excluded_au_indices)] = True
            patches[i] = torch.stack([_chw(p) for p in x.mask.patches])
    return Batch(images, originals, labels, labeled, centers, flow, has_flow,
                 masked, mask_au, excluded, patches)
