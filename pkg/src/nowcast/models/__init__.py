"""Baseline U-Net, ViViT and SWIN-UNETR nowcasting models."""

from nowcast.models.baseline import BaselineUNet
from nowcast.models.config import ADAPTERS, FAMILIES, IMPROVEMENTS, BackboneConfig
from nowcast.models.core import (
    ModelOutput,
    NowcastModel,
    build_model,
    load_checkpoint,
    save_checkpoint,
    temporal_shift,
)
from nowcast.models.swin_unetr import (
    ChannelConvAdapter,
    SwinNowcaster,
    SwinUNETR,
    adapt_repeat_interleave,
    resize_spatial,
)
from nowcast.models.vivit import ViViT

__all__ = [
    "ADAPTERS",
    "FAMILIES",
    "IMPROVEMENTS",
    "BackboneConfig",
    "BaselineUNet",
    "ChannelConvAdapter",
    "ModelOutput",
    "NowcastModel",
    "SwinNowcaster",
    "SwinUNETR",
    "ViViT",
    "adapt_repeat_interleave",
    "build_model",
    "load_checkpoint",
    "resize_spatial",
    "save_checkpoint",
    "temporal_shift",
]
