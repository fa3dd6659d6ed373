"""3D U-Net over (band-channels, time-as-depth, height, width).

With no improvement flags this is a plain ReLU / batch-norm / transposed
convolution U-Net standing in for the official competition baseline. Each
flag swaps in one modification independently:

``attention_grid``  attention gates on every skip connection
``rrelu``           randomized leaky ReLU instead of ReLU
``instance_norm``   instance instead of batch normalization
``upsample_conv``   interpolation + convolution instead of ConvTranspose3d
"""

from __future__ import annotations

import torch
import torch.nn.functional as F
from torch import nn

from nowcast.data import GridSpec


def _act(rrelu: bool) -> nn.Module:
    return nn.RReLU() if rrelu else nn.ReLU()


def _norm(channels: int, instance: bool) -> nn.Module:
    return nn.InstanceNorm3d(channels, affine=True) if instance else nn.BatchNorm3d(channels)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int, rrelu: bool, instance: bool):
        super().__init__(
            nn.Conv3d(cin, cout, 3, padding=1),
            _norm(cout, instance),
            _act(rrelu),
            nn.Conv3d(cout, cout, 3, padding=1),
            _norm(cout, instance),
            _act(rrelu),
        )


class AttentionGate(nn.Module):
    """Additive attention gate: rescales skip features by a learned [0, 1] map."""

    def __init__(self, skip_ch: int, gate_ch: int, inter_ch: int):
        super().__init__()
        self.theta = nn.Conv3d(skip_ch, inter_ch, 1, bias=False)
        self.phi = nn.Conv3d(gate_ch, inter_ch, 1)
        self.psi = nn.Conv3d(inter_ch, 1, 1)

    def forward(self, skip: torch.Tensor, gate: torch.Tensor) -> torch.Tensor:
        a = torch.sigmoid(self.psi(F.relu(self.theta(skip) + self.phi(gate))))
        return skip * a


class UpStep(nn.Module):
    def __init__(self, cin: int, cout: int, upsample_conv: bool):
        super().__init__()
        self.upsample_conv = upsample_conv
        if upsample_conv:
            self.conv = nn.Conv3d(cin, cout, 3, padding=1)
        else:
            self.tconv = nn.ConvTranspose3d(cin, cout, kernel_size=(1, 2, 2), stride=(1, 2, 2))

    def forward(self, x: torch.Tensor, size: tuple[int, int, int]) -> torch.Tensor:
        if self.upsample_conv:
            return self.conv(F.interpolate(x, size=size, mode="trilinear", align_corners=False))
        y = self.tconv(x)
        # odd sides were ceil-pooled; crop back to the skip's size
        return y[:, :, : size[0], : size[1], : size[2]]


class BaselineUNet(nn.Module):
    def __init__(self, grid: GridSpec, base_channels: int = 8, levels: int = 3, improvements=frozenset()):
        super().__init__()
        imp = frozenset(improvements)
        rrelu, inorm = "rrelu" in imp, "instance_norm" in imp
        self.attention = "attention_grid" in imp
        self.grid = grid
        widths = [base_channels * 2**i for i in range(levels)]
        self.enc = nn.ModuleList()
        cin = grid.in_bands
        for w in widths:
            self.enc.append(ConvBlock(cin, w, rrelu, inorm))
            cin = w
        self.pool = nn.MaxPool3d((1, 2, 2), ceil_mode=True)
        self.up = nn.ModuleList()
        self.gates = nn.ModuleList()
        self.dec = nn.ModuleList()
        for hi, lo in zip(widths[::-1][:-1], widths[::-1][1:]):
            self.up.append(UpStep(hi, lo, "upsample_conv" in imp))
            if self.attention:
                self.gates.append(AttentionGate(lo, lo, max(lo // 2, 1)))
            self.dec.append(ConvBlock(2 * lo, lo, rrelu, inorm))
        # fold the context steps into channels and emit one map per lead time
        self.head = nn.Conv2d(widths[0] * grid.in_steps, grid.out_steps, 1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        skips = []
        for i, block in enumerate(self.enc):
            x = block(x)
            if i < len(self.enc) - 1:
                skips.append(x)
                x = self.pool(x)
        for k, (up, dec) in enumerate(zip(self.up, self.dec)):
            skip = skips.pop()
            x = up(x, tuple(skip.shape[2:]))
            if self.attention:
                skip = self.gates[k](skip, x)
            x = dec(torch.cat([skip, x], dim=1))
        b, c, t, h, w = x.shape
        return self.head(x.reshape(b, c * t, h, w))
