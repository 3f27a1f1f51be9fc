"""Intra-denoise router network and its loss terms."""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import NamedTuple

import torch
import torch.nn as nn

from .conditioning import attend
from .tensor_store import TokenGridDims, token_positions


@dataclass
class RouterLossWeights:
    ce: float = 1.0
    st: float = 0.001
    layer: float = 8.0

    def __post_init__(self):
        if min(self.ce, self.st, self.layer) < 0:
            raise ValueError(f"loss weights must be nonnegative: {self}")


def default_rope_split(dim: int, extents: tuple[int, int, int]) -> tuple[int, int, int]:
    """Even per-axis chunks proportional to the grid extents; remainder goes to t."""
    if dim % 2:
        raise ValueError(f"rotary dim must be even, got {dim}")
    pairs = dim // 2
    total = sum(extents)
    h = pairs * extents[1] // total
    w = pairs * extents[2] // total
    return (2 * (pairs - h - w), 2 * h, 2 * w)


def rope3d_apply(features: torch.Tensor, positions: torch.Tensor, split, base: float = 10000.0) -> torch.Tensor:
    """Axial rotary embedding over (t, h, w).

    ``features`` is ``(..., S, d)`` and ``positions`` is ``(S, 3)``. Each axis
    rotates its own contiguous chunk of ``split`` feature pairs.
    """
    if sum(split) != features.shape[-1]:
        raise ValueError(f"split {split} does not sum to feature dim {features.shape[-1]}")
    if any(s % 2 for s in split):
        raise ValueError(f"rotary chunks must be even, got {split}")
    positions = torch.as_tensor(positions, dtype=features.dtype, device=features.device)
    out, start = [], 0
    for axis, size in enumerate(split):
        chunk = features[..., start : start + size]
        start += size
        if size == 0:
            continue
        freqs = base ** (-torch.arange(0, size, 2, dtype=features.dtype, device=features.device) / size)
        angle = positions[:, axis, None] * freqs  # S x size/2
        cos, sin = torch.cos(angle), torch.sin(angle)
        even, odd = chunk[..., 0::2], chunk[..., 1::2]
        rotated = torch.stack([even * cos - odd * sin, even * sin + odd * cos], dim=-1)
        out.append(rotated.flatten(-2))
    return torch.cat(out, dim=-1)


class SpatioTemporalBlock(nn.Module):
    def __init__(self, width: int, heads: int, dims: TokenGridDims):
        super().__init__()
        self.heads = heads
        head_dim = width // heads
        self.split = default_rope_split(head_dim, dims.shape)
        self.register_buffer("positions", torch.as_tensor(token_positions(dims), dtype=torch.float32), persistent=False)
        self.norm1 = nn.LayerNorm(width)
        self.qkv = nn.Linear(width, 3 * width)
        self.out = nn.Linear(width, width)
        self.norm2 = nn.LayerNorm(width)
        self.mlp = nn.Sequential(nn.Linear(width, 2 * width), nn.GELU(), nn.Linear(2 * width, width))

    def forward(self, x):
        *lead, s, d = x.shape
        q, k, v = self.qkv(self.norm1(x)).reshape(*lead, s, 3, self.heads, d // self.heads).movedim(-2, -4).unbind(-2)
        pos = self.positions.to(x.dtype)
        q = rope3d_apply(q, pos, self.split)
        k = rope3d_apply(k, pos, self.split)
        h = attend(q, k, v).movedim(-3, -2).reshape(*lead, s, d)
        x = x + self.out(h)
        return x + self.mlp(self.norm2(x))


class RouterOutput(NamedTuple):
    logits: torch.Tensor
    probs: torch.Tensor


class RouterNet(nn.Module):
    """Predicts an (n+1)-class routing mask per layer from face cross-attention taps.

    Per layer, head-preserving linear maps transform the tapped queries and
    keys; their scaled products form a ``heads * n * q`` feature per token,
    which RoPE-equipped spatio-temporal attention blocks and a linear softmax
    head turn into class probabilities.
    """

    def __init__(
        self,
        layers: int,
        heads: int,
        head_dim: int,
        n_chars: int,
        queries: int,
        dims: TokenGridDims,
        width: int = 64,
        blocks: int = 2,
        block_heads: int = 4,
    ):
        super().__init__()
        self.layers, self.heads, self.n_chars, self.queries = layers, heads, n_chars, queries
        self.dims = dims
        scale = 1.0 / math.sqrt(head_dim)
        self.q_maps = nn.Parameter(torch.randn(layers, heads, head_dim, head_dim) * scale)
        self.k_maps = nn.Parameter(torch.randn(layers, heads, head_dim, head_dim) * scale)
        self.in_proj = nn.Linear(heads * n_chars * queries, width)
        self.blocks = nn.ModuleList(SpatioTemporalBlock(width, block_heads, dims) for _ in range(blocks))
        self.norm = nn.LayerNorm(width)
        self.head = nn.Linear(width, n_chars + 1)

    def forward(self, q_tap: torch.Tensor, k_tap: torch.Tensor, layers=None) -> RouterOutput:
        """``q_tap``: ``(..., L, heads, S, dh)``; ``k_tap``: ``(..., L, heads, n*q, dh)``.

        ``layers`` selects which per-layer maps apply when fewer than all
        layers are passed (used for in-flight routing during sampling).
        """
        q_maps = self.q_maps if layers is None else self.q_maps[list(layers)]
        k_maps = self.k_maps if layers is None else self.k_maps[list(layers)]
        n_layers = q_maps.shape[0]
        S = self.dims.size
        if q_tap.shape[-4:] != (n_layers, self.heads, S, q_tap.shape[-1]):
            raise ValueError(f"q_tap shape {tuple(q_tap.shape)} does not match L={n_layers}, heads={self.heads}, S={S}")
        if k_tap.shape[-4:-1] != (n_layers, self.heads, self.n_chars * self.queries):
            raise ValueError(f"k_tap shape {tuple(k_tap.shape)} does not match n*q={self.n_chars * self.queries}")
        q = torch.einsum("...lhsd,lhde->...lhse", q_tap, q_maps.to(q_tap.dtype))
        k = torch.einsum("...lhkd,lhde->...lhke", k_tap, k_maps.to(k_tap.dtype))
        weights = q @ k.transpose(-1, -2) / math.sqrt(q.shape[-1])  # ..., L, heads, S, n*q
        feats = weights.movedim(-3, -2).flatten(-2)  # ..., L, S, heads*n*q
        x = self.in_proj(feats)
        for block in self.blocks:
            x = block(x)
        logits = self.head(self.norm(x)).movedim(-1, -2)  # ..., L, n+1, S
        logits = logits.reshape(*logits.shape[:-1], *self.dims.shape)
        return RouterOutput(logits, torch.softmax(logits, dim=-4))


def router_forward(q_tap, k_tap, router: RouterNet) -> RouterOutput:
    return router(q_tap, k_tap)


def loss_ce(probs: torch.Tensor, gt: torch.Tensor, mean: bool = False) -> torch.Tensor:
    """Cross-entropy over all classes, layers and tokens (sum unless ``mean``)."""
    if probs.shape != gt.shape:
        raise ValueError(f"shape mismatch: probs {tuple(probs.shape)} vs gt {tuple(gt.shape)}")
    total = -(gt * torch.log(probs.clamp_min(1e-12))).sum()
    if mean:
        return total / (probs.numel() // probs.shape[-4])
    return total


def loss_st(mask: torch.Tensor) -> torch.Tensor:
    """L1 norm of forward differences along t, h and w (in-bounds only)."""
    return sum(mask.diff(dim=axis).abs().sum() for axis in (-3, -2, -1))


def loss_layer(mask: torch.Tensor) -> torch.Tensor:
    """Population variance across layers (axis -5), summed over every position."""
    if mask.dim() < 5 or mask.shape[-5] < 2:
        raise ValueError("layer-consistency loss needs at least two layers")
    return mask.var(dim=-5, unbiased=False).sum()


def loss_router(probs: torch.Tensor, gt: torch.Tensor, weights: RouterLossWeights = RouterLossWeights(), mean: bool = False):
    """Weighted router objective; returns ``(total, {"ce", "st", "layer"})``."""
    chars = probs[..., :-1, :, :, :]
    terms = {"ce": loss_ce(probs, gt, mean=mean), "st": loss_st(chars), "layer": loss_layer(chars)}
    total = weights.ce * terms["ce"] + weights.st * terms["st"] + weights.layer * terms["layer"]
    return total, terms
