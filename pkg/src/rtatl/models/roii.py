"""RoI inpainting heads: patch generator, real/fake critic and AU classifier."""
from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

EPS = 1e-7


def _ladder(size: int) -> tuple[int, int]:
    """Number of 2x stages (at most four) and the base resolution they start from."""
    ups = 0
    while ups < 4 and size % (2 ** (ups + 1)) == 0:
        ups += 1
    return ups, size // 2 ** ups


class Generator(nn.Module):
    """Five transposed convolutions from a 1x1 ``d``-channel seed to ``3 x s x s``."""

    def __init__(self, d: int = 128, size: int = 48, channels=(1024, 512, 256, 128)):
        super().__init__()
        self.size = size
        ups, base = _ladder(size)
        widths = [*channels, 3]
        layers: list[nn.Module] = [nn.ConvTranspose2d(d, widths[0], base), nn.ReLU()]
        for i in range(4):
            if i < 4 - ups:
                layers.append(nn.ConvTranspose2d(widths[i], widths[i + 1], 3, 1, 1))
            else:
                layers.append(nn.ConvTranspose2d(widths[i], widths[i + 1], 4, 2, 1))
            layers.append(nn.ReLU() if i < 3 else nn.Sigmoid())
        self.net = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.net(x[..., None, None])


class PatchCritic(nn.Module):
    """Five convolutions mapping a ``3 x s x s`` patch to one probability.

    Used both as the real/fake discriminator and as the AU classifier.
    """

    def __init__(self, size: int = 48, channels=(128, 256, 512, 1024)):
        super().__init__()
        self.size = size
        ups, base = _ladder(size)
        widths = [3, *channels]
        layers: list[nn.Module] = []
        for i in range(4):
            if i < ups:
                layers.append(nn.Conv2d(widths[i], widths[i + 1], 4, 2, 1))
            else:
                layers.append(nn.Conv2d(widths[i], widths[i + 1], 3, 1, 1))
            layers.append(nn.LeakyReLU(0.2))
        layers.append(nn.Conv2d(widths[-1], 1, base))
        self.net = nn.Sequential(*layers)

    def logits(self, patch: torch.Tensor) -> torch.Tensor:
        if patch.ndim != 4 or patch.shape[1:] != (3, self.size, self.size):
            raise ValueError(f"expected B x 3 x {self.size} x {self.size}, got {tuple(patch.shape)}")
        return self.net(patch).flatten()

    def forward(self, patch: torch.Tensor) -> torch.Tensor:
        return torch.sigmoid(self.logits(patch))


def _log(p: torch.Tensor) -> torch.Tensor:
    return torch.log(p.clamp(EPS, 1 - EPS))


def adversarial_losses(d_real: torch.Tensor, d_fake: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
    """``(l_adv, l_adv_g)`` from critic probabilities on real and generated patches."""
    l_adv = _log(d_real).mean() + _log(1 - d_fake).mean()
    l_adv_g = -_log(d_fake).mean()
    return l_adv, l_adv_g


def reconstruction_loss(p: torch.Tensor, g: torch.Tensor, reduction: str = "sum") -> torch.Tensor:
    """L1 distance per patch, averaged over the batch.

    ``reduction`` picks how pixels inside a patch combine: ``"sum"`` gives the
    plain L1 norm, ``"mean"`` divides it by the element count.
    """
    per_patch = (p - g).abs().flatten(1)
    return _reduce(per_patch, reduction).mean()


def _reduce(per_item: torch.Tensor, reduction: str) -> torch.Tensor:
    if reduction == "sum":
        return per_item.sum(1)
    if reduction == "mean":
        return per_item.mean(1)
    raise ValueError(f"reduction must be 'sum' or 'mean', got {reduction!r}")


def binary_cross_entropy(prob: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    return -(target * _log(prob) + (1 - target) * _log(1 - prob))


def semantic_losses(c_real: torch.Tensor, c_fake: torch.Tensor, y_hat: torch.Tensor):
    """``(l_c, l_c_g)``: classifier cross-entropy on real and on generated patches."""
    if not torch.all((y_hat == 0) | (y_hat == 1)):
        raise ValueError("semantic labels must be binary")
    y = y_hat.to(c_real.dtype)
    return binary_cross_entropy(c_real, y).mean(), binary_cross_entropy(c_fake, y).mean()


def pseudo_label(probs_fused: torch.Tensor, au_index, threshold: float = 0.5) -> torch.Tensor:
    """1 where the intact-image probability of the erased AU reaches ``threshold``."""
    probs = probs_fused.detach()
    if probs.ndim == 1:
        return (probs[au_index] >= threshold).long()
    rows = torch.arange(probs.shape[0], device=probs.device)
    return (probs[rows, au_index] >= threshold).long()


@dataclass
class RoIIBatch:
    x: torch.Tensor      # n x d attended tokens of erased sides
    p: torch.Tensor      # n x 3 x s x s original patches
    y_hat: torch.Tensor  # n semantic labels


@dataclass
class RoIILosses:
    l_adv: torch.Tensor
    l_adv_g: torch.Tensor
    l_rec: torch.Tensor
    l_c: torch.Tensor
    l_c_g: torch.Tensor
    l_d: torch.Tensor
    l_g: torch.Tensor


class EmptyBatch(Exception):
    """No erased RoIs in the step; the inpainting update is skipped."""


class RoIIHeads(nn.Module):
    def __init__(self, d: int = 128, size: int = 48, gen_channels=(1024, 512, 256, 128),
                 disc_channels=(128, 256, 512, 1024)):
        super().__init__()
        self.generator = Generator(d, size, gen_channels)
        self.discriminator = PatchCritic(size, disc_channels)
        self.classifier = PatchCritic(size, disc_channels)

    def critic_parameters(self):
        yield from self.discriminator.parameters()
        yield from self.classifier.parameters()

    def step(self, batch: RoIIBatch, lambda1: float = 0.1, lambda2: float = 0.1,
             fake: torch.Tensor | None = None, reduction: str = "sum") -> RoIILosses:
        """All inpainting losses for one batch of erased (token, patch, label) triples."""
        if batch.x.shape[0] == 0:
            raise EmptyBatch
        if fake is None:
            fake = self.generator(batch.x)
        l_adv, l_adv_g = adversarial_losses(self.discriminator(batch.p), self.discriminator(fake))
        l_c, l_c_g = semantic_losses(self.classifier(batch.p), self.classifier(fake), batch.y_hat)
        l_rec = reconstruction_loss(batch.p, fake, reduction)
        l_g = lambda1 * l_adv_g + (1 - lambda1) * l_rec + lambda2 * l_c_g
        return RoIILosses(l_adv=l_adv, l_adv_g=l_adv_g, l_rec=l_rec, l_c=l_c, l_c_g=l_c_g,
                          l_d=-l_adv, l_g=l_g)


def roii_step(heads: RoIIHeads, batch: RoIIBatch, lambda1: float = 0.1, lambda2: float = 0.1,
              reduction: str = "sum") -> RoIILosses:
    return heads.step(batch, lambda1, lambda2, reduction=reduction)
