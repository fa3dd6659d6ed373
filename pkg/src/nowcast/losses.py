"""Training objectives over predicted rain probabilities.

All losses take probabilities (not logits) and a binary target of the same
shape, and reduce to a scalar tensor. ``soft_iou_grad`` and ``dice_grad``
give closed-form gradients of the two set-overlap losses; they are what the
finite-difference checks compare against.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Callable

import numpy as np
import torch

from nowcast.errors import ConfigurationError, DomainError

__all__ = [
    "LossConfig",
    "bce_weighted",
    "soft_iou_loss",
    "dice_loss",
    "focal_loss",
    "dice_focal",
    "soft_iou_grad",
    "dice_grad",
    "make_loss",
    "pos_weight_from_dataset",
]

PROB_EPS = 1e-7
LOSS_KINDS = ("bce", "soft_iou", "dice", "focal", "dice_focal")


@dataclass
class LossConfig:
    kind: str = "bce"
    pos_weight: float = 1.0
    focal_gamma: float = 2.0
    focal_alpha: float = 0.25
    mix_weight: float = 0.5
    smooth: float = 1.0

    def validate(self) -> "LossConfig":
        if self.kind not in LOSS_KINDS:
            raise ConfigurationError(f"loss kind must be one of {LOSS_KINDS}, got {self.kind!r}")
        if not self.pos_weight > 0:
            raise ConfigurationError(f"pos_weight must be > 0, got {self.pos_weight}")
        if not self.focal_gamma >= 0:
            raise ConfigurationError(f"focal_gamma must be >= 0, got {self.focal_gamma}")
        if not 0 <= self.focal_alpha <= 1:
            raise ConfigurationError(f"focal_alpha must be in [0, 1], got {self.focal_alpha}")
        if not 0 <= self.mix_weight <= 1:
            raise ConfigurationError(f"mix_weight must be in [0, 1], got {self.mix_weight}")
        if not self.smooth > 0:
            raise ConfigurationError(f"smooth must be > 0, got {self.smooth}")
        return self

    def to_dict(self) -> dict:
        return asdict(self)


def _prep(probs, target) -> tuple[torch.Tensor, torch.Tensor]:
    p = torch.as_tensor(probs)
    if not p.is_floating_point():
        p = p.double()
    y = torch.as_tensor(target).to(p.dtype)
    if p.shape != y.shape:
        raise DomainError(f"shape mismatch: probs {tuple(p.shape)} vs target {tuple(y.shape)}")
    return p, y


def bce_weighted(probs, target, pos_weight: float = 1.0) -> torch.Tensor:
    p, y = _prep(probs, target)
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    return -(pos_weight * y * torch.log(p) + (1 - y) * torch.log1p(-p)).mean()


def soft_iou_loss(probs, target, smooth: float = 1.0) -> torch.Tensor:
    p, y = _prep(probs, target)
    inter = (p * y).sum()
    union = p.sum() + y.sum() - inter
    return 1 - (inter + smooth) / (union + smooth)


def dice_loss(probs, target, smooth: float = 1.0) -> torch.Tensor:
    p, y = _prep(probs, target)
    inter = (p * y).sum()
    return 1 - (2 * inter + smooth) / ((p * p).sum() + (y * y).sum() + smooth)


def focal_loss(probs, target, gamma: float = 2.0, alpha: float = 0.25) -> torch.Tensor:
    p, y = _prep(probs, target)
    p = p.clamp(PROB_EPS, 1 - PROB_EPS)
    p_t = y * p + (1 - y) * (1 - p)
    alpha_t = y * alpha + (1 - y) * (1 - alpha)
    return -(alpha_t * (1 - p_t) ** gamma * torch.log(p_t)).mean()


def dice_focal(probs, target, cfg: LossConfig) -> torch.Tensor:
    w = cfg.mix_weight
    return w * dice_loss(probs, target, cfg.smooth) + (1 - w) * focal_loss(
        probs, target, cfg.focal_gamma, cfg.focal_alpha
    )


def soft_iou_grad(probs, target, smooth: float = 1.0) -> torch.Tensor:
    """d soft_iou_loss / d probs, in closed form."""
    p, y = _prep(probs, target)
    inter = (p * y).sum()
    union = p.sum() + y.sum() - inter + smooth
    return -(y * union - (inter + smooth) * (1 - y)) / union**2


def dice_grad(probs, target, smooth: float = 1.0) -> torch.Tensor:
    """d dice_loss / d probs, in closed form."""
    p, y = _prep(probs, target)
    num = 2 * (p * y).sum() + smooth
    den = (p * p).sum() + (y * y).sum() + smooth
    return -(2 * y * den - num * 2 * p) / den**2


def make_loss(cfg: LossConfig) -> Callable[[torch.Tensor, torch.Tensor], torch.Tensor]:
    cfg.validate()
    if cfg.kind == "bce":
        return lambda p, y: bce_weighted(p, y, cfg.pos_weight)
    if cfg.kind == "soft_iou":
        return lambda p, y: soft_iou_loss(p, y, cfg.smooth)
    if cfg.kind == "dice":
        return lambda p, y: dice_loss(p, y, cfg.smooth)
    if cfg.kind == "focal":
        return lambda p, y: focal_loss(p, y, cfg.focal_gamma, cfg.focal_alpha)
    return lambda p, y: dice_focal(p, y, cfg)


def pos_weight_from_dataset(dataset) -> float:
    """Ratio of negative to positive target pixels over the whole dataset."""
    pos = 0
    total = 0
    targets = dataset.iter_targets() if hasattr(dataset, "iter_targets") else dataset
    for tgt in targets:
        tgt = np.asarray(tgt)
        pos += int(np.count_nonzero(tgt))
        total += tgt.size
    neg = total - pos
    if pos == 0 or neg == 0:
        raise DomainError(
            f"pos_weight undefined: dataset has {pos} positive and {neg} negative target pixels"
        )
    return neg / pos

