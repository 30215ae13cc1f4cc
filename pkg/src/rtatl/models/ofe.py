"""Single-image optical-flow head on the stride-32 trunk maps."""
from __future__ import annotations

import torch
from torch import nn


class FlowHead(nn.Module):
    """Two 2x transposed convolutions; linear output (flow is signed)."""

    def __init__(self, in_channels: int = 512, hidden: int = 256):
        super().__init__()
        self.in_channels = in_channels
        self.up1 = nn.ConvTranspose2d(in_channels, hidden, 4, 2, 1)
        self.act = nn.ReLU()
        self.up2 = nn.ConvTranspose2d(hidden, 2, 4, 2, 1)

    def forward(self, global_maps: torch.Tensor) -> torch.Tensor:
        if global_maps.ndim != 4 or global_maps.shape[1] != self.in_channels:
            raise ValueError(f"expected B x {self.in_channels} x h x w, got {tuple(global_maps.shape)}")
        return self.up2(self.act(self.up1(global_maps)))


def flow_loss(f_p: torch.Tensor, f_g: torch.Tensor, valid: torch.Tensor,
              reduction: str = "sum") -> torch.Tensor:
    """L1 over each flow map (summed, or averaged per element with
    ``reduction="mean"``), averaged over samples that have a target.

    Samples with ``valid == False`` are dropped before any arithmetic, so they
    contribute neither value nor gradient.
    """
    if f_p.shape != f_g.shape:
        raise ValueError(f"predicted flow {tuple(f_p.shape)} vs target {tuple(f_g.shape)}")
    valid = valid.bool()
    if not bool(valid.any()):
        return f_p.sum() * 0.0
    diff = (f_p[valid] - f_g[valid]).abs().flatten(1)
    if reduction == "sum":
        return diff.sum(1).mean()
    if reduction == "mean":
        return diff.mean(1).mean()
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")
