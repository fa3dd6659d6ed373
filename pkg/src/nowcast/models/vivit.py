"""Factorized video transformer with a class-token-to-image head.

A spatial transformer runs on every frame independently (time folded into
the batch axis), its per-frame class tokens feed a temporal transformer, and
that transformer's class token is reshaped to a square map, bilinearly
upsampled to the radar grid and turned into one logit map per lead time by
a final convolution.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F
from torch import nn

from nowcast.attention import TransformerBlock
from nowcast.data import GridSpec
from nowcast.errors import ConfigurationError


def sincos_embedding(positions: torch.Tensor, dim: int) -> torch.Tensor:
    """Fixed sine/cosine features of integer positions, shape (len, dim)."""
    half = dim // 2
    freq = torch.exp(-math.log(10000.0) * torch.arange(half, dtype=torch.float32) / max(half, 1))
    ang = positions.float()[:, None] * freq[None, :]
    emb = torch.cat([ang.sin(), ang.cos()], dim=1)
    return F.pad(emb, (0, dim - emb.shape[1]))


def sincos_2d(side: int, dim: int) -> torch.Tensor:
    """Row features in the first half of the channels, column features in the second."""
    rows, cols = torch.meshgrid(torch.arange(side), torch.arange(side), indexing="ij")
    half = dim // 2
    return torch.cat([sincos_embedding(rows.flatten(), half), sincos_embedding(cols.flatten(), dim - half)], dim=1)


class ViViT(nn.Module):
    def __init__(
        self,
        grid: GridSpec,
        token_dim: int = 64,
        patch: int = 12,
        heads: int = 4,
        spatial_depth: int = 2,
        temporal_depth: int = 2,
    ):
        super().__init__()
        root = math.isqrt(token_dim)
        if root * root != token_dim:
            raise ConfigurationError(f"token_dim must be a perfect square, got {token_dim}")
        if grid.side % patch:
            raise ConfigurationError(f"ViViT patch size {patch} must divide the grid side {grid.side}")
        self.grid = grid
        self.token_dim = token_dim
        self.map_side = root
        n_patches = (grid.side // patch) ** 2

        self.patch_embed = nn.Conv2d(grid.in_bands, token_dim, patch, stride=patch)
        self.space_cls = nn.Parameter(torch.zeros(1, 1, token_dim))
        self.space_pos = nn.Parameter(torch.zeros(1, n_patches + 1, token_dim))
        self.space = nn.Sequential(*(TransformerBlock(token_dim, heads) for _ in range(spatial_depth)))
        self.space_norm = nn.LayerNorm(token_dim)

        self.time_cls = nn.Parameter(torch.zeros(1, 1, token_dim))
        self.time_pos = nn.Parameter(torch.zeros(1, grid.in_steps + 1, token_dim))
        self.time = nn.Sequential(*(TransformerBlock(token_dim, heads) for _ in range(temporal_depth)))
        self.time_norm = nn.LayerNorm(token_dim)

        self.head = nn.Conv2d(1, grid.out_steps, 3, padding=1)
        # learned, but started from sin-cos so patches are distinguishable from step 0
        with torch.no_grad():
            self.space_pos[0, 1:] = sincos_2d(grid.side // patch, token_dim)
            self.time_pos[0, 1:] = sincos_embedding(torch.arange(grid.in_steps), token_dim)
        nn.init.trunc_normal_(self.space_cls, std=0.02)
        nn.init.trunc_normal_(self.time_cls, std=0.02)

    def encode(self, x: torch.Tensor) -> torch.Tensor:
        """(B, bands, T, H, W) -> final class token (B, token_dim)."""
        b, c, t, h, w = x.shape
        frames = x.permute(0, 2, 1, 3, 4).reshape(b * t, c, h, w)
        tok = self.patch_embed(frames).flatten(2).transpose(1, 2)
        tok = torch.cat([self.space_cls.expand(b * t, -1, -1), tok], dim=1) + self.space_pos
        frame_cls = self.space_norm(self.space(tok))[:, 0].reshape(b, t, -1)

        seq = torch.cat([self.time_cls.expand(b, -1, -1), frame_cls], dim=1) + self.time_pos
        return self.time_norm(self.time(seq))[:, 0]

    def token_map(self, token: torch.Tensor) -> torch.Tensor:
        """Class token (B, D) -> upsampled map (B, 1, side, side)."""
        m = token.reshape(-1, 1, self.map_side, self.map_side)
        return F.interpolate(m, size=(self.grid.side, self.grid.side), mode="bilinear", align_corners=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.head(self.token_map(self.encode(x)))
