from __future__ import annotations

import dataclasses
import json
import math
from dataclasses import dataclass, field

from nowcast.errors import ConfigurationError

FAMILIES = ("baseline", "vivit", "swin_unetr")
ADAPTERS = ("repeat_interleave", "channel_conv", "upsample_decoder")
IMPROVEMENTS = ("attention_grid", "rrelu", "instance_norm", "upsample_conv")


def _triple(v) -> tuple[int, int, int]:
    if isinstance(v, int):
        return (v, v, v)
    v = tuple(int(x) for x in v)
    if len(v) != 3:
        raise ConfigurationError(f"expected 3 values, got {v}")
    return v


@dataclass
class BackboneConfig:
    """Architecture hyperparameters; serialized into every checkpoint.

    Fields irrelevant to ``family`` are ignored (``adapter`` and the window
    settings for SWIN-UNETR, ``improvements`` for the baseline, ``token_dim``
    and the transformer depths for ViViT).
    """

    family: str = "swin_unetr"
    adapter: str = "repeat_interleave"
    improvements: frozenset = field(default_factory=frozenset)
    embed_dim: int = 24
    depths: tuple = (2, 2, 2)
    heads: tuple = (2, 2, 2)
    window: tuple = (2, 4, 4)
    patch_size: tuple = (2, 2, 2)
    temporal_shift: bool = False
    interp_side: int = 256
    token_dim: int = 64
    # baseline U-Net
    base_channels: int = 8
    levels: int = 3
    # ViViT
    vivit_patch: int = 12  # 252 = 21 * 12
    vivit_heads: int = 4
    spatial_depth: int = 2
    temporal_depth: int = 2
    # accepted for config compatibility; not exercised by the tests
    grad_checkpoint: bool = False
    mixed_precision: bool = False

    def __post_init__(self):
        self.improvements = frozenset(self.improvements)
        self.depths = tuple(int(d) for d in self.depths)
        if isinstance(self.heads, int):
            self.heads = (self.heads,) * len(self.depths)
        self.heads = tuple(int(h) for h in self.heads)
        self.window = _triple(self.window)
        self.patch_size = _triple(self.patch_size)

    @property
    def downsample_factor(self) -> int:
        return self.patch_size[1] * 2 ** len(self.depths)

    def validate(self) -> "BackboneConfig":
        if self.family not in FAMILIES:
            raise ConfigurationError(f"family must be one of {FAMILIES}, got {self.family!r}")
        if self.family == "baseline":
            bad = self.improvements - set(IMPROVEMENTS)
            if bad:
                raise ConfigurationError(f"unknown baseline improvements {sorted(bad)}; valid: {IMPROVEMENTS}")
            if self.base_channels <= 0 or self.levels <= 0:
                raise ConfigurationError("base_channels and levels must be positive")
        elif self.family == "vivit":
            root = math.isqrt(max(self.token_dim, 0))
            if self.token_dim <= 0 or root * root != self.token_dim:
                raise ConfigurationError(f"token_dim must be a perfect square, got {self.token_dim}")
            if self.token_dim % self.vivit_heads:
                raise ConfigurationError(
                    f"token_dim ({self.token_dim}) must be divisible by vivit_heads ({self.vivit_heads})"
                )
        else:
            if self.adapter not in ADAPTERS:
                raise ConfigurationError(f"adapter must be one of {ADAPTERS}, got {self.adapter!r}")
            if self.interp_side <= 0 or self.interp_side % 32:
                raise ConfigurationError(
                    f"interp_side must be divisible by 32 for swin_unetr (five stride-2 "
                    f"downsamplings), got {self.interp_side}"
                )
            if self.interp_side % self.downsample_factor:
                raise ConfigurationError(
                    f"interp_side {self.interp_side} not divisible by the encoder's total "
                    f"downsampling {self.downsample_factor}"
                )
            if len(self.heads) != len(self.depths) or not self.depths:
                raise ConfigurationError("heads must give one value per stage in depths")
            dim = self.embed_dim
            for h in self.heads:
                if dim % h:
                    raise ConfigurationError(f"stage width {dim} not divisible by {h} heads")
                dim *= 2
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["improvements"] = sorted(self.improvements)
        for k in ("depths", "heads", "window", "patch_size"):
            d[k] = list(d[k])
        return d

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, d: dict) -> "BackboneConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown model config keys {sorted(unknown)}")
        return cls(**d)

    @classmethod
    def desk(cls, family: str, adapter: str = "repeat_interleave", **overrides) -> "BackboneConfig":
        """Small configuration sized for the 64x64 desk grid."""
        base = dict(
            family=family,
            adapter=adapter,
            interp_side=64,
            embed_dim=12,
            depths=(2, 2),
            heads=(2, 2),
            window=(2, 4, 4),
            patch_size=(2, 2, 2),
            token_dim=256,
            vivit_patch=16,
            vivit_heads=4,
            spatial_depth=1,
            temporal_depth=1,
            base_channels=8,
            levels=3,
        )
        if family == "baseline":
            base["improvements"] = frozenset(IMPROVEMENTS)
        base.update(overrides)
        return cls(**base)
