"""The full network: inference backbone plus the two training-only auxiliary heads."""
from __future__ import annotations

import logging
from pathlib import Path

import torch
from torch import nn

from ..config import AUSpec, HyperParams, config_hash, dump_config
from .backbone import (TRUNK_CHANNELS, FeatureBundle, Prediction, PredictionHeads, RoIBranches,
                       TopDownFusion, Trunk, crop_roi_features)
from .ofe import FlowHead
from .roii import RoIIHeads
from .transformer import AttentionOutput, RelationTransformer

log = logging.getLogger(__name__)

FUSED_STRIDE = 4


class CheckpointMismatch(RuntimeError):
    pass


class RTATLNet(nn.Module):
    def __init__(self, spec: AUSpec, hp: HyperParams, trunk_weights=None):
        super().__init__()
        self.spec, self.hp = spec, hp
        n = spec.N
        self.trunk = Trunk(hp.input_size, weights=trunk_weights)
        self.fusion = TopDownFusion(TRUNK_CHANNELS, hp.fusion_channels)
        self.roi_branches = RoIBranches(n, hp.fusion_channels, hp.roi_hidden, hp.d)
        self.transformer = RelationTransformer(n, hp.d, hp.heads, hp.ffn_dim)
        self.heads = PredictionHeads(n, hp.d, TRUNK_CHANNELS[-1])
        # training-only modules
        self.roii = RoIIHeads(hp.d, spec.patch_size, hp.gen_channels, hp.disc_channels)
        self.flow_head = FlowHead(TRUNK_CHANNELS[-1], hp.flow_hidden)

    @property
    def flow_size(self) -> int:
        return self.hp.input_size // 8

    def inference_modules(self) -> list[nn.Module]:
        return [self.trunk, self.fusion, self.roi_branches, self.transformer, self.heads]

    def auxiliary_modules(self) -> list[nn.Module]:
        return [self.roii, self.flow_head]

    def features(self, images: torch.Tensor, centers: torch.Tensor):
        stages = self.trunk(images)
        fused = self.fusion(stages)
        patches = crop_roi_features(fused, centers, self.spec.patch_size,
                                    FUSED_STRIDE, self.hp.roi_cells)
        roi = self.roi_branches(patches)
        bundle = FeatureBundle(global_maps=stages[-1], fused_maps=fused, roi_features=roi,
                               global_vec=stages[-1].mean(dim=(2, 3)))
        return bundle, self.transformer(roi), stages

    def predict(self, bundle: FeatureBundle, attended: torch.Tensor) -> Prediction:
        return self.heads(bundle.global_vec, attended)

    def forward(self, images: torch.Tensor, centers: torch.Tensor) -> Prediction:
        """Inference path: backbone, transformer and prediction heads only."""
        bundle, att, _ = self.features(images, centers)
        return self.predict(bundle, att.per_au)

    def main_parameters(self):
        critic = {id(p) for p in self.roii.critic_parameters()}
        return [p for p in self.parameters() if id(p) not in critic]

    def critic_parameters(self):
        return list(self.roii.critic_parameters())

    def count_parameters(self, mode: str = "inference") -> int:
        if mode == "train":
            modules = self.inference_modules() + self.auxiliary_modules()
        elif mode == "inference":
            modules = self.inference_modules()
        else:
            raise ValueError(f"mode must be 'train' or 'inference', got {mode!r}")
        return sum(p.numel() for m in modules for p in m.parameters())


def save_checkpoint(path, model: RTATLNet, **extra) -> None:
    torch.save({
        "state_dict": model.state_dict(),
        "config": dump_config(model.spec, model.hp),
        "config_hash": config_hash(model.spec, model.hp),
        **extra,
    }, Path(path))


def load_checkpoint(path, spec: AUSpec, hp: HyperParams) -> tuple[RTATLNet, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=False)
    expected = config_hash(spec, hp)
    if blob.get("config_hash") != expected:
        raise CheckpointMismatch(
            f"{path}: checkpoint config hash {blob.get('config_hash')} != {expected}")
    model = RTATLNet(spec, hp)
    model.load_state_dict(blob["state_dict"])
    return model, blob


def load_trunk_weights(model: RTATLNet, path) -> None:
    """Initialise the trunk from a torchvision ResNet-18 state dict file."""
    state = torch.load(Path(path), map_location="cpu", weights_only=True)
    mapped = {}
    for key, value in state.items():
        if key.startswith("fc."):
            continue
        head, _, rest = key.partition(".")
        if head in ("conv1", "bn1"):
            idx = 0 if head == "conv1" else 1
            mapped[f"stem.{idx}.{rest}"] = value
        elif head.startswith("layer"):
            mapped[f"layers.{int(head[5:]) - 1}.{rest}"] = value
    missing, unexpected = model.trunk.load_state_dict(mapped, strict=False)
    if missing or unexpected:
        log.warning("trunk init: %d missing, %d unexpected keys", len(missing), len(unexpected))
