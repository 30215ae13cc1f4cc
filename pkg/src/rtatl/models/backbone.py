"""Inference-time backbone: residual trunk, top-down fusion, per-AU RoI branches."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn
from torchvision.models import resnet18

TRUNK_CHANNELS = (64, 128, 256, 512)
TRUNK_STRIDES = (4, 8, 16, 32)


@dataclass
class FeatureBundle:
    global_maps: torch.Tensor   # B x 512 x H/32 x W/32
    fused_maps: torch.Tensor    # B x C_f x H/4 x W/4
    roi_features: torch.Tensor  # B x N x 2 x d
    global_vec: torch.Tensor    # B x 512


@dataclass
class Prediction:
    probs_global: torch.Tensor
    probs_roi: torch.Tensor
    probs_fused: torch.Tensor


class Trunk(nn.Module):
    """ResNet-18 without its classifier; returns the four stage outputs."""

    def __init__(self, input_size: int = 192, weights=None):
        super().__init__()
        net = resnet18(weights=weights)
        self.stem = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool)
        self.layers = nn.ModuleList([net.layer1, net.layer2, net.layer3, net.layer4])
        self.input_size = input_size

    def forward(self, image: torch.Tensor) -> list[torch.Tensor]:
        if image.ndim != 4 or image.shape[1:] != (3, self.input_size, self.input_size):
            raise ValueError(f"expected B x 3 x {self.input_size} x {self.input_size}, "
                             f"got {tuple(image.shape)}")
        x = self.stem(image)
        stages = []
        for layer in self.layers:
            x = layer(x)
            stages.append(x)
        return stages


class TopDownFusion(nn.Module):
    """Project every stage with a 1x1 conv, upsample top-down and add."""

    def __init__(self, in_channels=TRUNK_CHANNELS, out_channels: int = 128):
        super().__init__()
        self.out_channels = out_channels
        self.lateral = nn.ModuleList(nn.Conv2d(c, out_channels, 1, bias=False) for c in in_channels)

    def forward(self, stages: list[torch.Tensor]) -> torch.Tensor:
        if len(stages) != len(self.lateral):
            raise ValueError(f"expected {len(self.lateral)} stage maps, got {len(stages)}")
        for conv, x in zip(self.lateral, stages):
            if x.shape[1] != conv.in_channels:
                raise ValueError(f"stage has {x.shape[1]} channels, projection expects {conv.in_channels}")
        out = self.lateral[-1](stages[-1])
        for conv, x in zip(reversed(self.lateral[:-1]), reversed(stages[:-1])):
            out = F.interpolate(out, scale_factor=2, mode="nearest") + conv(x)
        return out


def crop_roi_features(fused_maps: torch.Tensor, centers: torch.Tensor, box_size: int,
                      stride: int = 4, cells: int = 6) -> torch.Tensor:
    """Bilinear RoI crop of ``box_size`` image-pixel boxes into ``cells x cells`` grids.

    ``centers`` is ``B x N x 2 x 2`` (x, y) in image pixel-edge coordinates.
    Returns ``B x N x 2 x C x cells x cells``; samples sit at bin centres.
    """
    b, c, h, w = fused_maps.shape
    n = centers.shape[1]
    offs = (torch.arange(cells, dtype=fused_maps.dtype, device=fused_maps.device) + 0.5) * box_size / cells - box_size / 2
    ctr = centers.to(fused_maps.dtype)
    xs = (ctr[..., 0, None] + offs) / stride    # B x N x 2 x cells (feature coords)
    ys = (ctr[..., 1, None] + offs) / stride
    gx = 2.0 * xs / w - 1.0
    gy = 2.0 * ys / h - 1.0
    grid = torch.stack(torch.broadcast_tensors(gx[..., None, :], gy[..., :, None]), dim=-1)
    grid = grid.reshape(b, n * 2 * cells, cells, 2)
    out = F.grid_sample(fused_maps, grid, mode="bilinear", padding_mode="border", align_corners=False)
    return out.reshape(b, c, n, 2, cells, cells).permute(0, 2, 3, 1, 4, 5)


class RoIBranches(nn.Module):
    """Two AU-specific 3x3 convolutions + average pooling.

    All AUs run at once as one grouped convolution; weights keep a per-AU
    ``(N, out, in, 3, 3)`` layout so a single branch is easy to slice out.
    """

    def __init__(self, n_aus: int, in_channels: int = 128, hidden: int = 256, out_dim: int = 128):
        super().__init__()
        self.n_aus = n_aus
        self.in_channels = in_channels
        self.weight1 = nn.Parameter(torch.empty(n_aus, hidden, in_channels, 3, 3))
        self.bias1 = nn.Parameter(torch.zeros(n_aus, hidden))
        self.weight2 = nn.Parameter(torch.empty(n_aus, out_dim, hidden, 3, 3))
        self.bias2 = nn.Parameter(torch.zeros(n_aus, out_dim))
        for w in (self.weight1, self.weight2):
            for i in range(n_aus):
                nn.init.kaiming_uniform_(w[i], a=5 ** 0.5)

    def forward(self, patches: torch.Tensor) -> torch.Tensor:
        b, n, sides, c, p, _ = patches.shape
        x = patches.transpose(1, 2).reshape(b * sides, n * c, p, p)
        x = F.relu(F.conv2d(x, self.weight1.flatten(0, 1), self.bias1.flatten(), padding=1, groups=n))
        x = F.relu(F.conv2d(x, self.weight2.flatten(0, 1), self.bias2.flatten(), padding=1, groups=n))
        x = x.mean(dim=(2, 3)).reshape(b, sides, n, -1)
        return x.transpose(1, 2)

    def branch(self, patch: torch.Tensor, au_index: int) -> torch.Tensor:
        """Run a single AU's branch on ``(..., C, p, p)`` patches."""
        if not 0 <= au_index < self.n_aus:
            raise IndexError(f"AU index {au_index} out of range 0..{self.n_aus - 1}")
        squeeze = patch.ndim == 3
        if squeeze:
            patch = patch[None]
        x = F.relu(F.conv2d(patch, self.weight1[au_index], self.bias1[au_index], padding=1))
        x = F.relu(F.conv2d(x, self.weight2[au_index], self.bias2[au_index], padding=1))
        x = x.mean(dim=(2, 3))
        return x[0] if squeeze else x


class PredictionHeads(nn.Module):
    def __init__(self, n_aus: int, d: int = 128, global_dim: int = 512):
        super().__init__()
        self.roi_weight = nn.Parameter(torch.empty(n_aus, d))
        self.roi_bias = nn.Parameter(torch.zeros(n_aus))
        nn.init.normal_(self.roi_weight, std=d ** -0.5)
        self.global_fc = nn.Linear(global_dim, n_aus)

    def forward(self, global_vec: torch.Tensor, attended: torch.Tensor) -> Prediction:
        roi_logits = (attended * self.roi_weight).sum(-1) + self.roi_bias
        probs_roi = torch.sigmoid(roi_logits)
        probs_global = torch.sigmoid(self.global_fc(global_vec))
        return Prediction(probs_global, probs_roi, fuse_max(probs_global, probs_roi))


def fuse_max(probs_global: torch.Tensor, probs_roi: torch.Tensor) -> torch.Tensor:
    return torch.maximum(probs_global, probs_roi)
