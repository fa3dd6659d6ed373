"""Turning probabilities into rain masks: thresholds and climatology calibration."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import h5py
import numpy as np

from nowcast.data import ClimatologyMap, ProbCube, RainCube
from nowcast.errors import ConfigurationError, DomainError
from nowcast.metrics import iou

__all__ = [
    "CalibrationMask",
    "DEFAULT_SWEEP",
    "apply_threshold",
    "sweep_threshold",
    "build_calibration",
    "apply_calibration",
    "store_calibration",
    "load_calibration",
]

DEFAULT_SWEEP = tuple(round(0.2 + 0.05 * i, 2) for i in range(11))  # 0.2 .. 0.7
CALIBRATION_DELTA = 1e-4


@dataclass
class CalibrationMask:
    factor: np.ndarray  # (height, width), positive
    clip_range: tuple[float, float] = (0.5, 2.0)

    def __post_init__(self):
        lo, hi = self.clip_range
        if not 0 < lo <= hi:
            raise ConfigurationError(f"clip range must satisfy 0 < lo <= hi, got {self.clip_range}")
        if self.factor.size and (self.factor.min() < lo or self.factor.max() > hi):
            raise DomainError("calibration factor leaves its clip range")


def _values(x) -> np.ndarray:
    return x.values if isinstance(x, (ProbCube, RainCube)) else np.asarray(x)


def apply_threshold(probs, tau: float = 0.5) -> RainCube:
    """Rain where the probability is strictly above ``tau``."""
    if not 0 < tau < 1:
        raise ConfigurationError(f"threshold must lie in (0, 1), got {tau}")
    mask = (_values(probs) > tau).astype(np.uint8)
    if isinstance(probs, ProbCube):
        return RainCube(mask, probs.region_id, probs.year, probs.timestamp)
    return RainCube(mask)


def sweep_threshold(
    probs: Sequence, gts: Sequence, grid: Sequence[float] = DEFAULT_SWEEP
) -> tuple[float, list[tuple[float, float]]]:
    """Pooled IoU at every threshold in ``grid``; best is the first maximum.

    Ties resolve toward the smaller threshold regardless of grid order.
    """
    if len(probs) != len(gts):
        raise DomainError(f"{len(probs)} probability cubes but {len(gts)} ground truths")
    if not len(grid):
        raise ConfigurationError("threshold grid is empty")
    p = np.stack([_values(x) for x in probs]) if len(probs) else np.zeros((0,))
    g = np.stack([_values(x) for x in gts]) if len(gts) else np.zeros((0,))
    curve = []
    for tau in sorted(float(t) for t in grid):
        curve.append((tau, iou(apply_threshold(p, tau).values, g)))
    best_tau, best = curve[0]
    for tau, score in curve[1:]:
        if score > best:
            best_tau, best = tau, score
    return best_tau, curve


def build_calibration(
    train_clim: ClimatologyMap,
    val_clim: ClimatologyMap,
    clip_range: tuple[float, float] = (0.5, 2.0),
    mode: str = "ratio",
) -> CalibrationMask:
    """Per-pixel factor shifting probabilities from train toward val climatology.

    ``ratio``: (val + d) / (train + d), clipped; below 1 where training rain
    was more frequent. ``difference``: 1 + (val - train), clipped.
    """
    a, b = np.asarray(train_clim.pixel_freq, float), np.asarray(val_clim.pixel_freq, float)
    if a.shape != b.shape:
        raise DomainError(f"climatology shapes differ: {a.shape} vs {b.shape}")
    lo, hi = clip_range
    if mode == "ratio":
        factor = (b + CALIBRATION_DELTA) / (a + CALIBRATION_DELTA)
    elif mode == "difference":
        factor = 1.0 + (b - a)
    else:
        raise ConfigurationError(f"calibration mode must be 'ratio' or 'difference', got {mode!r}")
    return CalibrationMask(np.clip(factor, lo, hi), (lo, hi))


def apply_calibration(probs, mask: CalibrationMask):
    v = _values(probs)
    if v.shape[-2:] != mask.factor.shape:
        raise DomainError(f"probability grid {v.shape[-2:]} does not match calibration {mask.factor.shape}")
    out = np.minimum(1.0, v * mask.factor)
    if isinstance(probs, ProbCube):
        return ProbCube(out, probs.region_id, probs.year, probs.timestamp)
    return out


def store_calibration(path, mask: CalibrationMask) -> None:
    with h5py.File(path, "a") as f:
        if "calibration" in f:
            del f["calibration"]
        d = f.create_dataset("calibration", data=mask.factor, track_times=False)
        d.attrs["clip_lo"], d.attrs["clip_hi"] = mask.clip_range


def load_calibration(path) -> CalibrationMask:
    with h5py.File(path, "r") as f:
        if "calibration" not in f:
            raise DomainError(f"no calibration stored in {path}")
        d = f["calibration"]
        return CalibrationMask(d[()], (float(d.attrs["clip_lo"]), float(d.attrs["clip_hi"])))
