"""Transformer building blocks shared by the ViViT and SWIN-UNETR models.

Token grids are channels-last: ``(batch, depth, height, width, channels)``.
Window helpers also accept an unbatched ``(depth, height, width, channels)``
grid.
"""

from __future__ import annotations

from typing import Sequence

import torch
import torch.nn.functional as F
import torch.utils.checkpoint
from torch import nn

from nowcast.errors import ConfigurationError, DomainError

__all__ = [
    "WindowConfig",
    "padded_dims",
    "window_partition",
    "window_reverse",
    "cyclic_shift",
    "effective_window",
    "shifted_window_mask",
    "MultiHeadSelfAttention",
    "RelativePositionBias",
    "TransformerBlock",
    "PatchEmbed3d",
    "PatchMerging",
    "SwinBlock3d",
    "SwinStage",
]

# large negative logit for masked keys; -inf would turn fully masked rows into NaN
MASK_VALUE = -1e9

Triple = tuple[int, int, int]


class WindowConfig:
    def __init__(self, window: Sequence[int], shift: Sequence[int] = (0, 0, 0)):
        window = tuple(int(w) for w in window)
        shift = tuple(int(s) for s in shift)
        if len(window) != 3 or len(shift) != 3:
            raise ConfigurationError("window and shift need exactly three axes (depth, height, width)")
        if any(w <= 0 for w in window):
            raise ConfigurationError(f"window sizes must be positive, got {window}")
        if any(s < 0 or s >= w for s, w in zip(shift, window)):
            raise ConfigurationError(f"shift must satisfy 0 <= shift < window per axis, got {shift} for {window}")
        self.window: Triple = window
        self.shift: Triple = shift

    @property
    def volume(self) -> int:
        return self.window[0] * self.window[1] * self.window[2]

    def __repr__(self) -> str:
        return f"WindowConfig(window={self.window}, shift={self.shift})"


def _window_of(cfg) -> Triple:
    return cfg.window if isinstance(cfg, WindowConfig) else tuple(cfg)


def padded_dims(dims: Sequence[int], window: Sequence[int]) -> Triple:
    return tuple(-(-d // w) * w for d, w in zip(dims, window))


def _batched(x: torch.Tensor) -> tuple[torch.Tensor, bool]:
    if x.dim() == 4:
        return x.unsqueeze(0), True
    if x.dim() == 5:
        return x, False
    raise DomainError(f"token grid must be (D, H, W, C) or (B, D, H, W, C), got shape {tuple(x.shape)}")


def window_partition(x: torch.Tensor, cfg) -> torch.Tensor:
    """Split a token grid into non-overlapping windows.

    Axes not divisible by the window are zero-padded at the far end. Returns
    ``(batch * n_windows, window_volume, channels)`` with windows in
    row-major (depth, height, width) order and tokens row-major inside each.
    """
    wd, wh, ww = _window_of(cfg)
    x, _ = _batched(x)
    b, d, h, w, c = x.shape
    pd, ph, pw = padded_dims((d, h, w), (wd, wh, ww))
    if (pd, ph, pw) != (d, h, w):
        x = F.pad(x, (0, 0, 0, pw - w, 0, ph - h, 0, pd - d))
    x = x.view(b, pd // wd, wd, ph // wh, wh, pw // ww, ww, c)
    x = x.permute(0, 1, 3, 5, 2, 4, 6, 7)
    return x.reshape(-1, wd * wh * ww, c)


def window_reverse(windows: torch.Tensor, original_shape: Sequence[int], cfg) -> torch.Tensor:
    """Inverse of :func:`window_partition`; strips any padding."""
    wd, wh, ww = _window_of(cfg)
    shape = tuple(original_shape)
    if len(shape) == 4:
        b, (d, h, w, c) = 1, shape
    elif len(shape) == 5:
        b, d, h, w, c = shape
    else:
        raise DomainError(f"original_shape must have 4 or 5 axes, got {shape}")
    pd, ph, pw = padded_dims((d, h, w), (wd, wh, ww))
    x = windows.reshape(b, pd // wd, ph // wh, pw // ww, wd, wh, ww, c)
    x = x.permute(0, 1, 4, 2, 5, 3, 6, 7).reshape(b, pd, ph, pw, c)
    x = x[:, :d, :h, :w].contiguous()
    return x.view(shape)


def cyclic_shift(x: torch.Tensor, shift: Sequence[int] | WindowConfig, *, inverse: bool = False) -> torch.Tensor:
    """Roll the (depth, height, width) axes by ``-shift`` (``+shift`` if inverse)."""
    s = shift.shift if isinstance(shift, WindowConfig) else tuple(shift)
    if not any(s):
        return x
    sign = 1 if inverse else -1
    return torch.roll(x, shifts=tuple(sign * v for v in s), dims=(-4, -3, -2))


def effective_window(dims: Sequence[int], window: Sequence[int], shift: Sequence[int]) -> tuple[Triple, Triple]:
    """Shrink windows to the grid where an axis is no longer than the window.

    Such an axis holds a single window, so shifting it is pointless.
    """
    win = list(window)
    sh = list(shift)
    for i, d in enumerate(dims):
        if d <= win[i]:
            win[i] = d
            sh[i] = 0
    return tuple(win), tuple(sh)


def shifted_window_mask(
    dims: Sequence[int], window: Sequence[int], shift: Sequence[int], device=None
) -> torch.Tensor | None:
    """Additive attention mask ``(n_windows, vol, vol)`` for a shifted, padded grid.

    Blocks attention between tokens that were not spatial neighbours before
    the cyclic roll, and between any query and a padding token.
    """
    pdims = padded_dims(dims, window)
    needs_pad = tuple(pdims) != tuple(dims)
    if not any(shift) and not needs_pad:
        return None
    labels = torch.zeros((1, *pdims, 1), device=device)
    cnt = 0
    slices = [
        (slice(0, -w), slice(-w, -s), slice(-s, None)) if s > 0 else (slice(None),)
        for w, s in zip(window, shift)
    ]
    for sd in slices[0]:
        for sh in slices[1]:
            for sw in slices[2]:
                labels[:, sd, sh, sw, :] = cnt
                cnt += 1
    pad = torch.zeros((1, *pdims, 1), device=device)
    pad[:, dims[0]:] = 1
    pad[:, :, dims[1]:] = 1
    pad[:, :, :, dims[2]:] = 1
    # the region slices above are laid out on the already-rolled grid; padding
    # sits at the far end before rolling
    pad = cyclic_shift(pad, shift)
    lw = window_partition(labels, window).squeeze(-1)
    pw = window_partition(pad, window).squeeze(-1)
    mask = (lw.unsqueeze(1) != lw.unsqueeze(2)).float() * MASK_VALUE
    mask = mask + pw.unsqueeze(1) * MASK_VALUE
    return mask


def _init_linear(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.trunc_normal_(m.weight, std=0.02)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class RelativePositionBias(nn.Module):
    """Learned bias per head for each relative (dz, dy, dx) offset in a window.

    Windows smaller than the configured one (grids shorter than the window)
    reuse the same table, since their offsets are a subset.
    """

    def __init__(self, window: Sequence[int], heads: int):
        super().__init__()
        self.window = tuple(window)
        wd, wh, ww = self.window
        self.table = nn.Parameter(torch.zeros((2 * wd - 1) * (2 * wh - 1) * (2 * ww - 1), heads))
        nn.init.trunc_normal_(self.table, std=0.02)
        self._cache: dict[Triple, torch.Tensor] = {}

    def index(self, window: Sequence[int]) -> torch.Tensor:
        window = tuple(window)
        if window not in self._cache:
            wd, wh, ww = self.window
            coords = torch.stack(
                torch.meshgrid(*(torch.arange(n) for n in window), indexing="ij")
            ).flatten(1)
            rel = coords[:, :, None] - coords[:, None, :]
            self._cache[window] = (
                (rel[0] + wd - 1) * (2 * wh - 1) * (2 * ww - 1) + (rel[1] + wh - 1) * (2 * ww - 1) + rel[2] + ww - 1
            )
        return self._cache[window]

    def forward(self, window: Sequence[int] | None = None) -> torch.Tensor:
        idx = self.index(window or self.window).to(self.table.device)
        n = idx.shape[0]
        return self.table[idx.reshape(-1)].view(n, n, -1).permute(2, 0, 1)


class MultiHeadSelfAttention(nn.Module):
    """Softmax self-attention over ``(batch, tokens, channels)``.

    With ``window`` set, a learned relative-position bias over that window is
    added to the logits (window attention); without it the block is
    permutation-equivariant over tokens.
    """

    def __init__(self, dim: int, heads: int, window: Sequence[int] | None = None, qkv_bias: bool = True):
        super().__init__()
        if heads <= 0 or dim % heads:
            raise ConfigurationError(f"channels ({dim}) must be divisible by heads ({heads})")
        self.dim = dim
        self.heads = heads
        self.head_dim = dim // heads
        self.scale = self.head_dim**-0.5
        self.qkv = nn.Linear(dim, 3 * dim, bias=qkv_bias)
        self.proj = nn.Linear(dim, dim)
        self.rel_bias = RelativePositionBias(window, heads) if window is not None else None
        self.apply(_init_linear)

    def _qkv(self, x: torch.Tensor):
        b, n, c = x.shape
        qkv = self.qkv(x).view(b, n, 3, self.heads, self.head_dim).permute(2, 0, 3, 1, 4)
        return qkv[0], qkv[1], qkv[2]

    def attention_logits(
        self, x: torch.Tensor, mask: torch.Tensor | None = None, window: Sequence[int] | None = None
    ) -> torch.Tensor:
        """Pre-softmax scores ``(batch, heads, tokens, tokens)``.

        ``mask`` is additive, shaped ``(n_windows, tokens, tokens)``; the batch
        axis must be a multiple of ``n_windows`` with windows varying fastest.
        """
        q, k, _ = self._qkv(x)
        return self._logits(q, k, mask, window)

    def _logits(self, q, k, mask, window):
        logits = (q * self.scale) @ k.transpose(-2, -1)
        n = q.shape[-2]
        if self.rel_bias is not None:
            logits = logits + self.rel_bias(window).unsqueeze(0)
        if mask is not None:
            nw = mask.shape[0]
            b = logits.shape[0]
            logits = logits.view(b // nw, nw, self.heads, n, n) + mask[None, :, None].to(logits.dtype)
            logits = logits.view(b, self.heads, n, n)
        return logits

    def forward(
        self,
        x: torch.Tensor,
        mask: torch.Tensor | None = None,
        return_attention: bool = False,
        window: Sequence[int] | None = None,
    ):
        if x.shape[-1] != self.dim:
            raise DomainError(f"expected {self.dim} channels, got {x.shape[-1]}")
        b, n, c = x.shape
        q, k, v = self._qkv(x)
        attn = self._logits(q, k, mask, window).softmax(dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(b, n, c)
        out = self.proj(out)
        if return_attention:
            return out, attn
        return out


class Mlp(nn.Sequential):
    def __init__(self, dim: int, ratio: float = 4.0):
        hidden = int(dim * ratio)
        super().__init__(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))
        self.apply(_init_linear)


class TransformerBlock(nn.Module):
    """Pre-norm global attention block, ``(batch, tokens, channels)``."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class PatchEmbed3d(nn.Module):
    """Non-overlapping 3D patches -> channels-last tokens."""

    def __init__(self, in_channels: int, dim: int, patch: Sequence[int]):
        super().__init__()
        self.patch = tuple(patch)
        self.proj = nn.Conv3d(in_channels, dim, kernel_size=self.patch, stride=self.patch)
        self.norm = nn.LayerNorm(dim)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        # x: (B, C, D, H, W)
        for axis, p in zip(x.shape[2:], self.patch):
            if axis % p:
                raise DomainError(
                    f"input axes {tuple(x.shape[2:])} are not divisible by patch size {self.patch}"
                )
        x = self.proj(x).permute(0, 2, 3, 4, 1)
        return self.norm(x)


class PatchMerging(nn.Module):
    """Concatenate 2x2 (or 2x2x2) neighbours and project linearly.

    Halves height and width (and depth when ``merge_depth``). Output width is
    ``2 * dim`` unless ``out_dim`` says otherwise.
    """

    def __init__(self, dim: int, merge_depth: bool = True, out_dim: int | None = None):
        super().__init__()
        self.merge_depth = merge_depth
        k = 8 if merge_depth else 4
        self.norm = nn.LayerNorm(k * dim)
        self.reduction = nn.Linear(k * dim, out_dim or 2 * dim, bias=False)
        self.apply(_init_linear)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        axes = (("depth", d), ("height", h), ("width", w)) if self.merge_depth else (("height", h), ("width", w))
        for name, size in axes:
            if size % 2:
                raise DomainError(
                    f"patch merging needs even axes but {name} is {size}; resize inputs so every "
                    "spatial side is divisible by 32 (2 ** number of downsampling stages)"
                )
        if self.merge_depth:
            parts = [
                x[:, i::2, j::2, k::2] for i in (0, 1) for j in (0, 1) for k in (0, 1)
            ]
        else:
            parts = [x[:, :, j::2, k::2] for j in (0, 1) for k in (0, 1)]
        return self.reduction(self.norm(torch.cat(parts, dim=-1)))


class SwinBlock3d(nn.Module):
    """(Shifted-)window attention block on a channels-last 3D grid."""

    def __init__(self, dim: int, heads: int, window: Sequence[int], shift: Sequence[int], mlp_ratio: float = 4.0):
        super().__init__()
        self.cfg = WindowConfig(window, shift)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = MultiHeadSelfAttention(dim, heads, window=self.cfg.window)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = Mlp(dim, mlp_ratio)

    def _attend(self, x: torch.Tensor) -> torch.Tensor:
        b, d, h, w, c = x.shape
        window, shift = effective_window((d, h, w), self.cfg.window, self.cfg.shift)
        mask = shifted_window_mask((d, h, w), window, shift, device=x.device)
        pd, ph, pw = padded_dims((d, h, w), window)
        if (pd, ph, pw) != (d, h, w):
            x = F.pad(x, (0, 0, 0, pw - w, 0, ph - h, 0, pd - d))
        x = cyclic_shift(x, shift)
        windows = self.attn(window_partition(x, window), mask=mask, window=window)
        x = window_reverse(windows, (b, pd, ph, pw, c), window)
        x = cyclic_shift(x, shift, inverse=True)
        return x[:, :d, :h, :w].contiguous()

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = x + self._attend(self.norm1(x))
        return x + self.mlp(self.norm2(x))


class SwinStage(nn.Module):
    """``depth`` blocks alternating plain and half-window-shifted attention."""

    def __init__(
        self,
        dim: int,
        depth: int,
        heads: int,
        window: Sequence[int],
        downsample: PatchMerging | None = None,
        grad_checkpoint: bool = False,
    ):
        super().__init__()
        shift = tuple(w // 2 for w in window)
        self.blocks = nn.ModuleList(
            SwinBlock3d(dim, heads, window, (0, 0, 0) if i % 2 == 0 else shift) for i in range(depth)
        )
        self.downsample = downsample
        self.grad_checkpoint = grad_checkpoint

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        for blk in self.blocks:
            if self.grad_checkpoint and self.training:
                x = torch.utils.checkpoint.checkpoint(blk, x, use_reentrant=False)
            else:
                x = blk(x)
        if self.downsample is not None:
            x = self.downsample(x)
        return x
