"""One-encoder / one-decoder transformer over left/right RoI tokens.

The encoder sees the 2N RoI tokens without positional encoding, so it is
permutation equivariant. The decoder adds a learned indicator per AU to both
of that AU's tokens so its outputs can be attributed back to AUs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn


def attention(q: torch.Tensor, k: torch.Tensor, v: torch.Tensor, return_weights: bool = False):
    """Scaled dot-product attention over the last two dims."""
    if q.shape[-1] != k.shape[-1]:
        raise ValueError(f"query dim {q.shape[-1]} != key dim {k.shape[-1]}")
    if k.shape[-2] != v.shape[-2]:
        raise ValueError(f"{k.shape[-2]} keys but {v.shape[-2]} values")
    scores = q @ k.transpose(-2, -1) / math.sqrt(q.shape[-1])
    weights = torch.softmax(scores, dim=-1)
    out = weights @ v
    return (out, weights) if return_weights else out


class MultiHeadAttention(nn.Module):
    def __init__(self, d: int, heads: int):
        super().__init__()
        if d % heads:
            raise ValueError(f"d={d} not divisible by heads={heads}")
        self.d, self.heads = d, heads
        self.q_proj = nn.Linear(d, d)
        self.k_proj = nn.Linear(d, d)
        self.v_proj = nn.Linear(d, d)
        self.out_proj = nn.Linear(d, d)
        self.last_weights = None

    def _split(self, x):
        b, n, _ = x.shape
        return x.reshape(b, n, self.heads, self.d // self.heads).transpose(1, 2)

    def forward(self, q, k, v):
        out, w = attention(self._split(self.q_proj(q)), self._split(self.k_proj(k)),
                           self._split(self.v_proj(v)), return_weights=True)
        self.last_weights = w.detach()
        b, h, m, dh = out.shape
        return self.out_proj(out.transpose(1, 2).reshape(b, m, h * dh))


class FeedForward(nn.Sequential):
    def __init__(self, d: int, hidden: int):
        super().__init__(nn.Linear(d, hidden), nn.ReLU(), nn.Linear(hidden, d))


class EncoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim)
        self.norm2 = nn.LayerNorm(d)

    def forward(self, x):
        x = self.norm1(x + self.self_attn(x, x, x))
        return self.norm2(x + self.ffn(x))


class DecoderLayer(nn.Module):
    def __init__(self, d: int, heads: int, ffn_dim: int):
        super().__init__()
        self.self_attn = MultiHeadAttention(d, heads)
        self.norm1 = nn.LayerNorm(d)
        self.cross_attn = MultiHeadAttention(d, heads)
        self.norm2 = nn.LayerNorm(d)
        self.ffn = FeedForward(d, ffn_dim)
        self.norm3 = nn.LayerNorm(d)

    def forward(self, x, memory):
        x = self.norm1(x + self.self_attn(x, x, x))
        x = self.norm2(x + self.cross_attn(x, memory, memory))
        return self.norm3(x + self.ffn(x))


@dataclass
class AttentionOutput:
    tokens: torch.Tensor  # B x 2N x d, ordered left_0, right_0, left_1, ...
    per_au: torch.Tensor  # B x N x d


def pair_average(tokens: torch.Tensor) -> torch.Tensor:
    b, m, d = tokens.shape
    return tokens.reshape(b, m // 2, 2, d).mean(dim=2)


class RelationTransformer(nn.Module):
    def __init__(self, n_aus: int, d: int = 128, heads: int = 8, ffn_dim: int = 256):
        super().__init__()
        self.n_aus = n_aus
        self.encoder = EncoderLayer(d, heads, ffn_dim)
        self.decoder = DecoderLayer(d, heads, ffn_dim)
        # d x N, one column per AU
        self.indicators = nn.Parameter(torch.randn(d, n_aus) * 0.02)

    def encode(self, tokens: torch.Tensor) -> torch.Tensor:
        return self.encoder(tokens)

    def decode(self, memory: torch.Tensor, queries: torch.Tensor,
               indicators: torch.Tensor | None = None) -> AttentionOutput:
        ind = self.indicators if indicators is None else indicators
        # column i is added to both tokens 2i and 2i+1
        queries = queries + ind.t().repeat_interleave(2, dim=0)
        out = self.decoder(queries, memory)
        return AttentionOutput(tokens=out, per_au=pair_average(out))

    def forward(self, roi_features: torch.Tensor) -> AttentionOutput:
        """``roi_features`` is ``B x N x 2 x d``."""
        b, n, _, d = roi_features.shape
        tokens = roi_features.reshape(b, 2 * n, d)
        return self.decode(self.encode(tokens), tokens)

    def attention_maps(self) -> list[torch.Tensor]:
        layers = (self.encoder.self_attn, self.decoder.self_attn, self.decoder.cross_attn)
        return [m.last_weights for m in layers if m.last_weights is not None]


def indicator_similarity(indicators: torch.Tensor) -> torch.Tensor:
    """Cosine similarity between indicator columns (``d x N`` -> ``N x N``)."""
    norms = indicators.norm(dim=0)
    if torch.any(norms == 0):
        raise ValueError("indicator column with zero norm has no defined direction")
    unit = indicators / norms
    sim = unit.t() @ unit
    return 0.5 * (sim + sim.t())
