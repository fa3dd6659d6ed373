"""SWIN-UNETR with three ways of bridging 4 context steps to 32 lead times.

The volume is (band-channels, time-as-depth, height, width). Height and
width are first resized to ``interp_side`` and the logits are resized back
to the grid side at the end. Adapters:

``repeat_interleave``  each context step is copied 8 times along depth
``channel_conv``       two 3x3 convolutions (4 -> 32 -> 32 steps) per band
``upsample_decoder``   the network keeps depth 4 and its decoder ends in
                       transposed convolutions that double depth up to 32
"""

from __future__ import annotations

import math
from typing import Sequence

import torch
import torch.nn.functional as F
from torch import nn

from nowcast.attention import PatchEmbed3d, PatchMerging, SwinStage
from nowcast.data import GridSpec
from nowcast.errors import ConfigurationError, DomainError
from nowcast.models.config import BackboneConfig


def resize_spatial(x: torch.Tensor, side: int) -> torch.Tensor:
    """Bilinear resize of the last two axes to ``side x side``."""
    if x.shape[-2:] == (side, side):
        return x
    lead = x.shape[:-2]
    flat = x.reshape(1, -1, *x.shape[-2:])
    out = F.interpolate(flat, size=(side, side), mode="bilinear", align_corners=False)
    return out.reshape(*lead, side, side)


def adapt_repeat_interleave(x: torch.Tensor, out_steps: int = 32, interp_side: int = 256) -> torch.Tensor:
    """(…, bands, steps, H, W) -> (…, bands, out_steps, interp_side, interp_side).

    Output step ``i`` is a copy of resized input step ``i // (out_steps // steps)``.
    """
    steps = x.shape[-3]
    if out_steps % steps:
        raise ConfigurationError(f"out_steps ({out_steps}) must be a multiple of the input steps ({steps})")
    return resize_spatial(x, interp_side).repeat_interleave(out_steps // steps, dim=-3)


class ChannelConvAdapter(nn.Module):
    """Learned replacement for step repetition.

    Runs per band over the time axis: Conv2d(steps -> out_steps, k3), RReLU,
    InstanceNorm, then Conv2d(out_steps -> out_steps, k3), RReLU, InstanceNorm.
    """

    def __init__(self, in_steps: int = 4, out_steps: int = 32, interp_side: int = 256):
        super().__init__()
        self.interp_side = interp_side
        self.conv1 = nn.Conv2d(in_steps, out_steps, 3, padding=1)
        self.act1 = nn.RReLU()
        self.norm1 = nn.InstanceNorm2d(out_steps)
        self.conv2 = nn.Conv2d(out_steps, out_steps, 3, padding=1)
        self.act2 = nn.RReLU()
        self.norm2 = nn.InstanceNorm2d(out_steps)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = resize_spatial(x, self.interp_side)
        b, c, t, h, w = x.shape
        y = x.reshape(b * c, t, h, w)
        y = self.norm1(self.act1(self.conv1(y)))
        y = self.norm2(self.act2(self.conv2(y)))
        return y.reshape(b, c, -1, h, w)


class UnetResBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.conv1 = nn.Conv3d(cin, cout, 3, padding=1, bias=False)
        self.norm1 = nn.InstanceNorm3d(cout, affine=True)
        self.conv2 = nn.Conv3d(cout, cout, 3, padding=1, bias=False)
        self.norm2 = nn.InstanceNorm3d(cout, affine=True)
        self.act = nn.LeakyReLU(0.01)
        self.skip = nn.Conv3d(cin, cout, 1, bias=False) if cin != cout else None

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        res = x if self.skip is None else self.skip(x)
        y = self.act(self.norm1(self.conv1(x)))
        y = self.norm2(self.conv2(y))
        return self.act(y + res)


class UnetrUpBlock(nn.Module):
    def __init__(self, cin: int, cout: int, factor: Sequence[int]):
        super().__init__()
        self.up = nn.ConvTranspose3d(cin, cout, kernel_size=tuple(factor), stride=tuple(factor), bias=False)
        self.block = UnetResBlock(2 * cout, cout)

    def forward(self, x: torch.Tensor, skip: torch.Tensor) -> torch.Tensor:
        return self.block(torch.cat([self.up(x), skip], dim=1))


class SwinUNETR(nn.Module):
    """Shifted-window encoder feeding a convolutional decoder through skips.

    ``keep_last_channels`` freezes the width of that many final merge layers
    (their output width equals their input width). ``depth_upsamples``
    appends that many depth-doubling transposed convolutions after the
    decoder.
    """

    def __init__(
        self,
        in_channels: int,
        feature_size: int = 24,
        depths: Sequence[int] = (2, 2, 2),
        heads: Sequence[int] = (2, 2, 2),
        window: Sequence[int] = (2, 4, 4),
        patch: Sequence[int] = (2, 2, 2),
        merge_depth: bool = True,
        keep_last_channels: int = 0,
        depth_upsamples: int = 0,
        grad_checkpoint: bool = False,
    ):
        super().__init__()
        n = len(depths)
        dims = [feature_size]
        for i in range(n):
            frozen = i >= n - keep_last_channels
            dims.append(dims[-1] if frozen else 2 * dims[-1])
        merge = (2 if merge_depth else 1, 2, 2)
        self.patch = tuple(patch)
        self.merge = merge
        self.patch_embed = PatchEmbed3d(in_channels, feature_size, patch)
        self.stages = nn.ModuleList(
            SwinStage(
                dims[i],
                depths[i],
                heads[i],
                window,
                downsample=PatchMerging(dims[i], merge_depth=merge_depth, out_dim=dims[i + 1]),
                grad_checkpoint=grad_checkpoint,
            )
            for i in range(n)
        )
        self.encoder_in = UnetResBlock(in_channels, feature_size)
        self.encoders = nn.ModuleList(UnetResBlock(d, d) for d in dims)
        self.decoders = nn.ModuleList(UnetrUpBlock(dims[i + 1], dims[i], merge) for i in reversed(range(n)))
        self.decoder_in = UnetrUpBlock(feature_size, feature_size, patch)
        ups = []
        c = feature_size
        for _ in range(depth_upsamples):
            nxt = max(c // 2, 4)
            ups += [nn.ConvTranspose3d(c, nxt, kernel_size=(2, 1, 1), stride=(2, 1, 1)), nn.LeakyReLU(0.01)]
            c = nxt
        self.depth_up = nn.Sequential(*ups)
        self.out = nn.Conv3d(c, 1, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, C, D, H, W) -> logits (B, D * 2**depth_upsamples, H, W)."""
        hidden = [self.patch_embed(x)]
        for stage in self.stages:
            hidden.append(stage(hidden[-1]))
        feats = [enc(h.permute(0, 4, 1, 2, 3)) for enc, h in zip(self.encoders, hidden)]
        y = feats[-1]
        for dec, skip in zip(self.decoders, reversed(feats[:-1])):
            y = dec(y, skip)
        y = self.decoder_in(y, self.encoder_in(x))
        return self.out(self.depth_up(y)).squeeze(1)


class SwinNowcaster(nn.Module):
    """Adapter + SWIN-UNETR + resize back to the grid."""

    def __init__(self, grid: GridSpec, cfg: BackboneConfig):
        super().__init__()
        cfg.validate()
        self.grid = grid
        self.adapter_name = cfg.adapter
        self.interp_side = cfg.interp_side
        factor = grid.out_steps // grid.in_steps
        if grid.out_steps % grid.in_steps:
            raise ConfigurationError("out_steps must be a multiple of in_steps")
        common = dict(
            feature_size=cfg.embed_dim,
            depths=cfg.depths,
            heads=cfg.heads,
            window=cfg.window,
            grad_checkpoint=cfg.grad_checkpoint,
        )
        if cfg.adapter == "upsample_decoder":
            n_up = int(round(math.log2(factor)))
            if 2**n_up != factor:
                raise ConfigurationError(f"upsample_decoder needs out_steps / in_steps to be a power of 2, got {factor}")
            self.adapter = None
            self.unet = SwinUNETR(
                grid.in_bands,
                patch=(1, *cfg.patch_size[1:]),
                merge_depth=False,
                keep_last_channels=min(2, len(cfg.depths)),
                depth_upsamples=n_up,
                **common,
            )
        else:
            if cfg.adapter == "channel_conv":
                self.adapter = ChannelConvAdapter(grid.in_steps, grid.out_steps, cfg.interp_side)
            else:
                self.adapter = None
            self.unet = SwinUNETR(grid.in_bands, patch=cfg.patch_size, **common)

    def adapt(self, x: torch.Tensor) -> torch.Tensor:
        if self.adapter_name == "repeat_interleave":
            return adapt_repeat_interleave(x, self.grid.out_steps, self.interp_side)
        if self.adapter_name == "channel_conv":
            return self.adapter(x)
        return resize_spatial(x, self.interp_side)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-1] != self.grid.side or x.shape[-2] != self.grid.side:
            raise DomainError(f"expected {self.grid.side}x{self.grid.side} input, got {tuple(x.shape[-2:])}")
        logits = self.unet(self.adapt(x))
        return resize_spatial(logits, self.grid.side)
