"""Shared model building blocks.

Token grids are tensors of shape (B, T, L, E): batch, time, tokens per frame,
embedding width. Every composite model here alternates spatial attention
(within a frame) with temporally causal attention (per token slot across
frames), so outputs at time t are exactly invariant to inputs at times > t.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


@dataclass(frozen=True)
class CodebookConfig:
    num_tokens: int = 4
    codebook_size: int = 16
    code_dim: int = 32

    def __post_init__(self):
        if self.num_tokens < 1 or self.codebook_size < 2 or self.code_dim < 1:
            raise ValueError("need num_tokens >= 1, codebook_size >= 2, code_dim >= 1")


# paper-scale values for reference; desk runs use the defaults above
FULL_SCALE_CODEBOOK = CodebookConfig(num_tokens=4, codebook_size=32, code_dim=128)


def sinusoidal_features(values: torch.Tensor, dim: int, max_period: float = 1e4) -> torch.Tensor:
    """Sin/cos features of scalar inputs; `values` shape (...,) -> (..., dim)."""
    half = dim // 2
    freqs = torch.exp(
        -math.log(max_period) * torch.arange(half, dtype=torch.float32) / max(half - 1, 1)
    ).to(values.device)
    angles = values.float().unsqueeze(-1) * freqs
    out = torch.cat([torch.sin(angles), torch.cos(angles)], dim=-1)
    if dim % 2:
        out = F.pad(out, (0, 1))
    return out


class PatchEmbed(nn.Module):
    """Linear patch projection with learned positional offsets."""

    def __init__(self, patch: int, in_channels: int, dim: int, image_hw: tuple[int, int]):
        super().__init__()
        h, w = image_hw
        if h % patch or w % patch:
            raise ValueError(f"image {h}x{w} not divisible by patch {patch}")
        self.patch = patch
        self.grid_hw = (h // patch, w // patch)
        self.num_tokens = self.grid_hw[0] * self.grid_hw[1]
        self.proj = nn.Conv2d(in_channels, dim, kernel_size=patch, stride=patch)
        self.pos = nn.Parameter(torch.zeros(self.num_tokens, dim))
        nn.init.trunc_normal_(self.pos, std=0.02)

    def forward(self, frames: torch.Tensor) -> torch.Tensor:
        """(B, T, H, W, C) frames -> (B, T, L, E) tokens."""
        b, t, h, w, c = frames.shape
        x = frames.reshape(b * t, h, w, c).permute(0, 3, 1, 2)
        x = self.proj(x)  # (B*T, E, h/p, w/p)
        x = x.flatten(2).transpose(1, 2)  # (B*T, L, E)
        return (x + self.pos).reshape(b, t, self.num_tokens, -1)


class PatchDecode(nn.Module):
    """Per-token linear head back to pixel patches, with bounded output."""

    def __init__(self, patch: int, out_channels: int, dim: int, image_hw: tuple[int, int]):
        super().__init__()
        self.patch = patch
        self.out_channels = out_channels
        self.image_hw = image_hw
        self.grid_hw = (image_hw[0] // patch, image_hw[1] // patch)
        self.head = nn.Linear(dim, patch * patch * out_channels)

    def forward(self, tokens: torch.Tensor, bounded: bool = True) -> torch.Tensor:
        """(B, T, L, E) patch tokens -> (B, T, H, W, C) frames."""
        b, t, l, _ = tokens.shape
        gh, gw = self.grid_hw
        x = self.head(tokens)
        x = x.reshape(b, t, gh, gw, self.patch, self.patch, self.out_channels)
        x = x.permute(0, 1, 2, 4, 3, 5, 6)
        x = x.reshape(b, t, gh * self.patch, gw * self.patch, self.out_channels)
        return torch.sigmoid(x) if bounded else x


class SelfAttention(nn.Module):
    """Multi-head self-attention over (batch, sequence, dim) tensors."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.qkv = nn.Linear(dim, 3 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, is_causal: bool = False) -> torch.Tensor:
        b, s, d = x.shape
        qkv = self.qkv(x).reshape(b, s, 3, self.heads, self.head_dim)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v, is_causal=is_causal)
        return self.out(y.transpose(1, 2).reshape(b, s, d))


class CrossAttention(nn.Module):
    """Multi-head attention from a query sequence into a context sequence."""

    def __init__(self, dim: int, heads: int):
        super().__init__()
        if dim % heads:
            raise ValueError("dim must be divisible by heads")
        self.heads = heads
        self.head_dim = dim // heads
        self.to_q = nn.Linear(dim, dim)
        self.to_kv = nn.Linear(dim, 2 * dim)
        self.out = nn.Linear(dim, dim)

    def forward(self, x: torch.Tensor, context: torch.Tensor) -> torch.Tensor:
        b, s, d = x.shape
        q = self.to_q(x).reshape(b, s, self.heads, self.head_dim).transpose(1, 2)
        kv = self.to_kv(context).reshape(b, context.shape[1], 2, self.heads, self.head_dim)
        k, v = kv.permute(2, 0, 3, 1, 4)
        y = F.scaled_dot_product_attention(q, k, v)
        return self.out(y.transpose(1, 2).reshape(b, s, d))


class SpatioTemporalBlock(nn.Module):
    """Spatial self-attention within each frame, then causally masked temporal
    self-attention per token slot, then a feed-forward sublayer (all pre-norm
    residual)."""

    def __init__(self, dim: int, heads: int, ff_mult: int = 4):
        super().__init__()
        self.spatial_norm = nn.LayerNorm(dim)
        self.spatial_attn = SelfAttention(dim, heads)
        self.temporal_norm = nn.LayerNorm(dim)
        self.temporal_attn = SelfAttention(dim, heads)
        self.ff_norm = nn.LayerNorm(dim)
        self.ff = nn.Sequential(
            nn.Linear(dim, ff_mult * dim), nn.GELU(), nn.Linear(ff_mult * dim, dim)
        )

    def forward(self, grid: torch.Tensor) -> torch.Tensor:
        b, t, l, e = grid.shape
        x = grid.reshape(b * t, l, e)
        x = x + self.spatial_attn(self.spatial_norm(x))
        x = x.reshape(b, t, l, e).permute(0, 2, 1, 3).reshape(b * l, t, e)
        x = x + self.temporal_attn(self.temporal_norm(x), is_causal=True)
        x = x.reshape(b, l, t, e).permute(0, 2, 1, 3)
        return x + self.ff(self.ff_norm(x))


class ReadoutTokens(nn.Module):
    """Learned query tokens appended per frame; their post-attention states act
    as the compressed per-step summary."""

    def __init__(self, n_readout: int, dim: int):
        super().__init__()
        self.n_readout = n_readout
        self.queries = nn.Parameter(torch.zeros(n_readout, dim))
        nn.init.trunc_normal_(self.queries, std=0.02)

    def append(self, grid: torch.Tensor) -> torch.Tensor:
        b, t, _, e = grid.shape
        q = self.queries.expand(b, t, self.n_readout, e)
        return torch.cat([grid, q], dim=2)

    def take(self, grid: torch.Tensor) -> torch.Tensor:
        """(B, T, L + N, E) -> (B, T, N, E) readout slot states."""
        return grid[:, :, -self.n_readout :, :]


class VectorQuantizer(nn.Module):
    """Nearest-code quantizer with straight-through gradients.

    One codebook is shared across all token positions. The loss combines the
    beta-scaled commitment term pulling encoder outputs toward their codes and
    the codebook term pulling codes toward encoder outputs.
    """

    def __init__(self, config: CodebookConfig, beta: float = 0.25):
        super().__init__()
        if beta < 0:
            raise ValueError("beta must be >= 0")
        self.config = config
        self.beta = beta
        self.codes = nn.Parameter(torch.randn(config.codebook_size, config.code_dim) * 0.5)
        self.register_buffer("usage_counts", torch.zeros(config.codebook_size, dtype=torch.int64))
        self.register_buffer(
            "usage_since_restart", torch.zeros(config.codebook_size, dtype=torch.int64)
        )

    def nearest_indices(self, z: torch.Tensor) -> torch.Tensor:
        """Argmin over exact squared distances; ties resolve to the lowest index."""
        flat = z.reshape(-1, self.config.code_dim)
        d = ((flat.unsqueeze(1) - self.codes.unsqueeze(0)) ** 2).sum(-1)
        return d.argmin(dim=1).reshape(z.shape[:-1])

    def lookup(self, indices: torch.Tensor) -> torch.Tensor:
        """Exact code rows for the given indices (detached)."""
        return self.codes.detach()[indices]

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
        """Returns (indices, straight-through quantized z, commitment loss)."""
        if not torch.isfinite(z).all():
            raise ValueError("non-finite encoder output passed to the quantizer")
        indices = self.nearest_indices(z)
        q = self.codes[indices]
        commit = self.beta * F.mse_loss(z, q.detach()) + F.mse_loss(q, z.detach())
        # straight-through surrogate while training; exact code rows otherwise
        quantized = z + (q - z).detach() if z.requires_grad else q.detach()
        with torch.no_grad():
            ones = torch.ones_like(indices.reshape(-1))
            self.usage_counts.scatter_add_(0, indices.reshape(-1), ones)
            self.usage_since_restart.scatter_add_(0, indices.reshape(-1), ones)
        return indices, quantized, commit

    def init_codes_from(self, rows: torch.Tensor, generator: torch.Generator) -> None:
        """Seed the codebook with k-means centroids of encoder outputs and
        reset the usage statistics."""
        with torch.no_grad():
            centers = kmeans_rows(
                rows.detach().reshape(-1, self.config.code_dim),
                self.config.codebook_size,
                generator=generator,
            )
            self.codes.copy_(centers)
            self.usage_counts.zero_()
            self.usage_since_restart.zero_()

    def restart_dead_codes(self, recent_z: torch.Tensor, generator: torch.Generator) -> int:
        """Re-seed codes unused since the last restart window to random encoder
        outputs; returns how many codes were restarted."""
        dead = (self.usage_since_restart == 0).nonzero(as_tuple=True)[0]
        flat = recent_z.detach().reshape(-1, self.config.code_dim)
        with torch.no_grad():
            for code_idx in dead.tolist():
                row = int(torch.randint(flat.shape[0], (1,), generator=generator))
                self.codes[code_idx] = flat[row]
            self.usage_since_restart.zero_()
        return int(dead.numel())


def kmeans_rows(
    rows: torch.Tensor, k: int, iters: int = 25, generator: torch.Generator | None = None
) -> torch.Tensor:
    """Plain Lloyd k-means over row vectors; deterministic given the generator."""
    if rows.shape[0] < k:
        raise ValueError(f"need at least {k} rows, got {rows.shape[0]}")
    perm = torch.randperm(rows.shape[0], generator=generator)[:k]
    centers = rows[perm].clone()
    for _ in range(iters):
        assign = torch.cdist(rows, centers).argmin(dim=1)
        for j in range(k):
            members = rows[assign == j]
            if members.shape[0]:
                centers[j] = members.mean(dim=0)
    return centers


def parameter_count(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def flat_parameters(module: nn.Module) -> list[tuple[str, nn.Parameter]]:
    return list(module.named_parameters())


def seed_all(seed: int) -> torch.Generator:
    """Seed torch's global RNG and return a dedicated generator."""
    torch.manual_seed(seed)
    g = torch.Generator()
    g.manual_seed(seed)
    return g
