"""Optimizers (AdamW, AdaBelief), the training loop and checkpoint selection."""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from nowcast.data import merge_train_val
from nowcast.errors import ConfigurationError, DomainError
from nowcast.losses import LossConfig, make_loss

__all__ = [
    "TrainConfig",
    "AdamW",
    "AdaBelief",
    "optimizer_step",
    "init_optimizer_state",
    "make_optimizer",
    "Checkpoint",
    "EpochMetrics",
    "TrainResult",
    "train",
    "evaluate_iou",
    "select_checkpoint",
    "write_metrics_csv",
    "read_metrics_csv",
]

log = logging.getLogger(__name__)

OPTIMIZERS = ("adamw", "adabelief")
DEFAULT_EPS = {"adamw": 1e-8, "adabelief": 1e-16}


@dataclass
class TrainConfig:
    optimizer: str = "adamw"
    lr: float = 1e-3
    betas: tuple = (0.9, 0.999)
    eps: float | None = None  # None picks the optimizer's default
    weight_decay: float = 1e-2
    epochs: int = 1
    batch_size: int = 4
    loss: LossConfig = field(default_factory=LossConfig)
    train_all: bool = False
    seed: int = 0
    mixed_precision: bool = False
    grad_checkpoint: bool = False
    max_steps: int | None = None
    stop_loss_ratio: float | None = None  # stop once step loss < ratio * first step loss
    threshold: float = 0.5
    shuffle: bool = True

    def __post_init__(self):
        if isinstance(self.loss, dict):
            self.loss = LossConfig(**self.loss)
        self.betas = tuple(float(b) for b in self.betas)

    @property
    def effective_eps(self) -> float:
        return DEFAULT_EPS.get(self.optimizer, 1e-8) if self.eps is None else self.eps

    def validate(self) -> "TrainConfig":
        if self.optimizer not in OPTIMIZERS:
            raise ConfigurationError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if not self.lr > 0:
            raise ConfigurationError(f"lr must be > 0, got {self.lr}")
        if len(self.betas) != 2 or not all(0 <= b < 1 for b in self.betas):
            raise ConfigurationError(f"betas must be two values in [0, 1), got {self.betas}")
        if not self.effective_eps > 0:
            raise ConfigurationError(f"eps must be > 0, got {self.eps}")
        if self.weight_decay < 0:
            raise ConfigurationError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if self.epochs < 0 or self.batch_size <= 0:
            raise ConfigurationError("epochs must be >= 0 and batch_size > 0")
        if not 0 < self.threshold < 1:
            raise ConfigurationError(f"threshold must be in (0, 1), got {self.threshold}")
        self.loss.validate()
        return self

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["betas"] = list(self.betas)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigurationError(f"unknown train config keys {sorted(unknown)}")
        return cls(**d)


# ---------------------------------------------------------------------------
# optimizers


def _adam_update(p, g, m, v, step, lr, beta1, beta2, eps, weight_decay, belief):
    """One in-place AdamW / AdaBelief update of tensor ``p``.

    AdaBelief tracks the variance of ``g - m`` (the surprise relative to the
    running mean) instead of the raw second moment, and adds ``eps`` to it.
    Weight decay is decoupled in both.
    """
    if weight_decay:
        p.mul_(1 - lr * weight_decay)
    m.mul_(beta1).add_(g, alpha=1 - beta1)
    if belief:
        diff = g - m
        v.mul_(beta2).addcmul_(diff, diff, value=1 - beta2).add_(eps)
    else:
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
    bc1 = 1 - beta1**step
    bc2 = 1 - beta2**step
    denom = (v / bc2).sqrt_().add_(eps)
    p.addcdiv_(m, denom, value=-lr / bc1)


def init_optimizer_state(params: dict[str, torch.Tensor]) -> dict:
    return {
        "step": 0,
        "skipped": 0,
        "exp_avg": {k: torch.zeros_like(v) for k, v in params.items()},
        "exp_avg_sq": {k: torch.zeros_like(v) for k, v in params.items()},
    }


def optimizer_step(
    params: dict[str, torch.Tensor], grads: dict[str, torch.Tensor], state: dict, cfg: TrainConfig
) -> tuple[dict[str, torch.Tensor], dict]:
    """Functional optimizer update; inputs are left untouched.

    A non-finite gradient anywhere skips the whole step and bumps
    ``state["skipped"]``.
    """
    if set(params) != set(grads) or set(params) != set(state["exp_avg"]):
        raise DomainError("params, grads and optimizer state must have the same keys")
    for k in params:
        if params[k].shape != grads[k].shape or params[k].shape != state["exp_avg"][k].shape:
            raise DomainError(f"shape mismatch for {k!r}")
    new_state = {
        "step": state["step"],
        "skipped": state["skipped"],
        "exp_avg": {k: v.clone() for k, v in state["exp_avg"].items()},
        "exp_avg_sq": {k: v.clone() for k, v in state["exp_avg_sq"].items()},
    }
    new_params = {k: v.clone() for k, v in params.items()}
    if not all(torch.isfinite(g).all() for g in grads.values()):
        new_state["skipped"] += 1
        return new_params, new_state
    new_state["step"] += 1
    b1, b2 = cfg.betas
    for k in new_params:
        _adam_update(
            new_params[k], grads[k], new_state["exp_avg"][k], new_state["exp_avg_sq"][k],
            new_state["step"], cfg.lr, b1, b2, cfg.effective_eps, cfg.weight_decay,
            cfg.optimizer == "adabelief",
        )
    return new_params, new_state


class _AdamFamily(torch.optim.Optimizer):
    belief = False

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-8, weight_decay=1e-2):
        if not lr > 0 or not eps > 0:
            raise ConfigurationError("lr and eps must be positive")
        super().__init__(params, dict(lr=lr, betas=tuple(betas), eps=eps, weight_decay=weight_decay))
        self.skipped_steps = 0

    @torch.no_grad()
    def step(self, closure=None):
        loss = None
        if closure is not None:
            with torch.enable_grad():
                loss = closure()
        grads = [p.grad for g in self.param_groups for p in g["params"] if p.grad is not None]
        if not all(torch.isfinite(g).all() for g in grads):
            self.skipped_steps += 1
            log.warning("non-finite gradient, skipping step (%d skipped so far)", self.skipped_steps)
            return loss
        for group in self.param_groups:
            b1, b2 = group["betas"]
            for p in group["params"]:
                if p.grad is None:
                    continue
                st = self.state[p]
                if not st:
                    st["step"] = 0
                    st["exp_avg"] = torch.zeros_like(p)
                    st["exp_avg_sq"] = torch.zeros_like(p)
                st["step"] += 1
                _adam_update(
                    p, p.grad, st["exp_avg"], st["exp_avg_sq"], st["step"],
                    group["lr"], b1, b2, group["eps"], group["weight_decay"], self.belief,
                )
        return loss


class AdamW(_AdamFamily):
    belief = False


class AdaBelief(_AdamFamily):
    belief = True

    def __init__(self, params, lr=1e-3, betas=(0.9, 0.999), eps=1e-16, weight_decay=1e-2):
        super().__init__(params, lr, betas, eps, weight_decay)


def make_optimizer(params: Iterable, cfg: TrainConfig) -> _AdamFamily:
    cls = AdaBelief if cfg.optimizer == "adabelief" else AdamW
    return cls(params, lr=cfg.lr, betas=cfg.betas, eps=cfg.effective_eps, weight_decay=cfg.weight_decay)


# ---------------------------------------------------------------------------
# training loop


@dataclass
class Checkpoint:
    epoch: int
    name: str
    state_dict: dict
    step: int


@dataclass
class EpochMetrics:
    epoch: int
    train_loss: float
    val_iou: float | None
    reliable: bool


@dataclass
class TrainResult:
    checkpoints: list[Checkpoint]
    metrics: list[EpochMetrics]
    step_losses: list[float]
    initial_loss: float
    skipped_steps: int

    def checkpoint(self, epoch: int) -> Checkpoint:
        for c in self.checkpoints:
            if c.epoch == epoch:
                return c
        raise DomainError(f"no checkpoint for epoch {epoch}")


def _batches(n: int, batch_size: int, gen: torch.Generator | None):
    order = torch.randperm(n, generator=gen).tolist() if gen is not None else list(range(n))
    for i in range(0, n, batch_size):
        yield order[i : i + batch_size]


def _stack(dataset, idx: Sequence[int], dtype=torch.float32):
    ctx, tgt = zip(*(dataset[i] for i in idx))
    return torch.as_tensor(np.stack(ctx), dtype=dtype), torch.as_tensor(np.stack(tgt), dtype=dtype)


@torch.no_grad()
def evaluate_iou(model, dataset, threshold: float = 0.5, batch_size: int = 4) -> float:
    """IoU pooled over every sample, step and pixel of ``dataset``."""
    was_training = model.training
    model.eval()
    inter = union = 0
    try:
        for idx in _batches(len(dataset), batch_size, None):
            x, y = _stack(dataset, idx)
            pred = torch.sigmoid(model(x)) > threshold
            gt = y > 0.5
            inter += int((pred & gt).sum())
            union += int((pred | gt).sum())
    finally:
        model.train(was_training)
    return 1.0 if union == 0 else inter / union


@torch.no_grad()
def _dataset_loss(model, dataset, loss_fn, batch_size: int) -> float:
    was_training = model.training
    model.eval()
    total, n = 0.0, 0
    try:
        for idx in _batches(len(dataset), batch_size, None):
            x, y = _stack(dataset, idx)
            total += float(loss_fn(torch.sigmoid(model(x)), y)) * len(idx)
            n += len(idx)
    finally:
        model.train(was_training)
    return total / n


def _snapshot(model) -> dict:
    return {k: v.detach().clone() for k, v in model.state_dict().items()}


def train(model, dataset, cfg: TrainConfig, val_dataset=None) -> TrainResult:
    """Fit ``model`` on ``dataset``; one checkpoint per epoch plus epoch 0.

    With ``cfg.train_all`` the validation samples join the training set and
    every validation score is flagged unreliable, since the model has seen
    those samples.
    """
    cfg.validate()
    if len(dataset) == 0:
        raise ConfigurationError("training dataset is empty")
    if cfg.train_all and val_dataset is not None:
        train_set = merge_train_val(dataset, val_dataset)
    else:
        train_set = dataset
    reliable = not cfg.train_all
    prefix = "train all. " if cfg.train_all else ""

    torch.manual_seed(cfg.seed)
    gen = torch.Generator().manual_seed(cfg.seed) if cfg.shuffle else None
    loss_fn = make_loss(cfg.loss)
    opt = make_optimizer(model.parameters(), cfg)
    for m in model.modules():
        if hasattr(m, "grad_checkpoint"):
            m.grad_checkpoint = cfg.grad_checkpoint

    initial = _dataset_loss(model, train_set, loss_fn, cfg.batch_size)
    checkpoints = [Checkpoint(0, f"{prefix}Epoch 0", _snapshot(model), 0)]
    metrics: list[EpochMetrics] = []
    step_losses: list[float] = []
    step = 0
    stop = False
    model.train()
    for epoch in range(1, cfg.epochs + 1):
        epoch_losses = []
        for idx in _batches(len(train_set), cfg.batch_size, gen):
            x, y = _stack(train_set, idx)
            opt.zero_grad(set_to_none=True)
            with torch.autocast("cpu", dtype=torch.bfloat16, enabled=cfg.mixed_precision):
                logits = model(x)
            loss = loss_fn(torch.sigmoid(logits.float()), y)
            loss.backward()
            opt.step()
            step += 1
            value = float(loss.detach())
            epoch_losses.append(value)
            step_losses.append(value)
            if cfg.stop_loss_ratio is not None and math.isfinite(value) and value < cfg.stop_loss_ratio * step_losses[0]:
                stop = True
            if cfg.max_steps is not None and step >= cfg.max_steps:
                stop = True
            if stop:
                break
        val_iou = evaluate_iou(model, val_dataset, cfg.threshold, cfg.batch_size) if val_dataset is not None else None
        metrics.append(EpochMetrics(epoch, float(np.mean(epoch_losses)), val_iou, reliable))
        checkpoints.append(Checkpoint(epoch, f"{prefix}Epoch {epoch}", _snapshot(model), step))
        log.info("epoch %d loss %.5f val_iou %s", epoch, metrics[-1].train_loss, val_iou)
        if stop:
            break
    model.eval()
    return TrainResult(checkpoints, metrics, step_losses, initial, opt.skipped_steps)


def select_checkpoint(history: Sequence[EpochMetrics], strategy: str = "best_val_iou") -> int:
    """Epoch of the checkpoint to keep; ties go to the earlier epoch."""
    if not history:
        raise DomainError("empty metric history")
    if strategy == "last":
        return history[-1].epoch
    if strategy != "best_val_iou":
        raise ConfigurationError(f"strategy must be 'best_val_iou' or 'last', got {strategy!r}")
    scored = [h for h in history if h.val_iou is not None]
    if not scored:
        raise DomainError("no validation IoU recorded; use strategy 'last'")
    best = scored[0]
    for h in scored[1:]:
        if h.val_iou > best.val_iou:
            best = h
    return best.epoch


def write_metrics_csv(path, metrics: Iterable[EpochMetrics]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(["epoch", "train_loss", "val_iou", "reliable_flag"])
        for m in metrics:
            w.writerow([m.epoch, repr(m.train_loss), "" if m.val_iou is None else repr(m.val_iou), int(m.reliable)])
    return path


def read_metrics_csv(path) -> list[EpochMetrics]:
    with open(path, newline="") as f:
        return [
            EpochMetrics(
                int(r["epoch"]),
                float(r["train_loss"]),
                float(r["val_iou"]) if r["val_iou"] else None,
                bool(int(r["reliable_flag"])),
            )
            for r in csv.DictReader(f)
        ]

