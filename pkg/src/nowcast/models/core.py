from __future__ import annotations

import io
import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from torch import nn

from nowcast.data import DEFAULT_GRID, ContextTensor, GridSpec, ProbCube
from nowcast.errors import ConfigurationError, DomainError
from nowcast.models.baseline import BaselineUNet
from nowcast.models.config import BackboneConfig
from nowcast.models.swin_unetr import SwinNowcaster
from nowcast.models.vivit import ViViT


def temporal_shift(deltas: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """Accumulate per-step logit increments: out[0] = d[0], out[i] = out[i-1] + d[i]."""
    return torch.cumsum(deltas, dim=dim)


@dataclass
class ModelOutput:
    logits: np.ndarray  # (time, side, side)
    probs: ProbCube


class NowcastModel(nn.Module):
    """Backbone plus optional temporal shift; maps contexts to lead-time logits."""

    def __init__(self, cfg: BackboneConfig, grid: GridSpec = DEFAULT_GRID):
        super().__init__()
        cfg.validate()
        grid.validate()
        self.cfg = cfg
        self.grid = grid
        if cfg.family == "baseline":
            self.backbone = BaselineUNet(grid, cfg.base_channels, cfg.levels, cfg.improvements)
        elif cfg.family == "vivit":
            self.backbone = ViViT(
                grid, cfg.token_dim, cfg.vivit_patch, cfg.vivit_heads, cfg.spatial_depth, cfg.temporal_depth
            )
        else:
            self.backbone = SwinNowcaster(grid, cfg)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, bands, steps, side, side) -> logits (B, out_steps, side, side)."""
        if tuple(x.shape[1:]) != self.grid.context_shape:
            raise DomainError(f"expected context batch (B, {self.grid.context_shape}), got {tuple(x.shape)}")
        logits = self.backbone(x)
        if self.cfg.temporal_shift:
            logits = temporal_shift(logits, dim=1)
        return logits

    @torch.no_grad()
    def predict(self, ctx: ContextTensor | np.ndarray) -> ModelOutput:
        values = ctx.values if isinstance(ctx, ContextTensor) else np.asarray(ctx)
        was_training = self.training
        self.eval()
        try:
            param = next(self.parameters())
            x = torch.as_tensor(values, dtype=param.dtype, device=param.device).unsqueeze(0)
            logits = self(x)[0]
        finally:
            self.train(was_training)
        meta = {}
        if isinstance(ctx, ContextTensor):
            meta = dict(region_id=ctx.region_id, year=ctx.year, timestamp=ctx.timestamp)
        return ModelOutput(logits.cpu().numpy(), ProbCube(torch.sigmoid(logits).cpu().numpy(), **meta))


def build_model(cfg: BackboneConfig, grid: GridSpec = DEFAULT_GRID, seed: int | None = None) -> NowcastModel:
    if seed is not None:
        torch.manual_seed(seed)
    return NowcastModel(cfg, grid)


def save_checkpoint(path, model: NowcastModel, step: int = 0, **extra) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "state_dict": model.state_dict(),
        "config": model.cfg.to_json(),
        "grid": model.grid.to_json(),
        "step": int(step),
        "extra": json.dumps(extra, sort_keys=True),
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    path.write_bytes(buf.getvalue())
    return path


def load_checkpoint(path) -> tuple[NowcastModel, int, dict]:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"checkpoint not found: {path}")
    payload = torch.load(path, map_location="cpu", weights_only=True)
    try:
        cfg = BackboneConfig.from_dict(json.loads(payload["config"]))
        grid = GridSpec.from_json(payload["grid"])
    except KeyError as exc:
        raise DomainError(f"{path} is not a model checkpoint: missing {exc}") from None
    model = NowcastModel(cfg, grid)
    try:
        model.load_state_dict(payload["state_dict"])
    except RuntimeError as exc:
        raise ConfigurationError(f"checkpoint weights do not match its config: {exc}") from None
    return model, int(payload["step"]), json.loads(payload.get("extra", "{}"))
