"""IoU, rain-rate binarization and leaderboard aggregation."""

from __future__ import annotations

import csv
from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

import numpy as np

from nowcast.errors import ConfigurationError, DomainError

__all__ = [
    "ScoreRecord",
    "LeaderboardRow",
    "iou",
    "binarize_rate",
    "leaderboard",
    "write_scores_csv",
    "read_scores_csv",
]

SCORE_COLUMNS = ("submission_name", "region_id", "year", "iou")


@dataclass(frozen=True)
class ScoreRecord:
    region_id: str
    year: int
    iou: float
    submission_name: str

    def __post_init__(self):
        if not 0.0 <= self.iou <= 1.0:
            raise DomainError(f"IoU must lie in [0, 1], got {self.iou}")


@dataclass
class LeaderboardRow:
    submission_name: str
    total_mean: float
    year_means: dict[int, float] = field(default_factory=dict)


def _as_mask(name: str, a) -> np.ndarray:
    a = np.asarray(a)
    if a.dtype == bool:
        return a
    if not np.isin(a, (0, 1)).all():
        raise DomainError(f"{name} must be binary (values in {{0, 1}})")
    return a.astype(bool)


def iou(pred, gt, *, per_slot: bool = False) -> float:
    """Intersection over union of two binary masks.

    By default the whole (time, H, W) volume is pooled. With ``per_slot`` the
    IoU of each leading-axis slice is averaged instead. Two empty masks count
    as a perfect match (1.0).
    """
    p = _as_mask("pred", pred)
    g = _as_mask("gt", gt)
    if p.shape != g.shape:
        raise DomainError(f"shape mismatch: pred {p.shape} vs gt {g.shape}")
    if per_slot:
        if p.ndim == 0:
            raise DomainError("per_slot IoU needs at least one axis")
        return float(np.mean([iou(a, b) for a, b in zip(p, g)]))
    union = np.count_nonzero(p | g)
    if union == 0:
        return 1.0
    return np.count_nonzero(p & g) / union


def binarize_rate(rate_cube, rate_threshold: float = 0.2) -> np.ndarray:
    """1 where the rain rate strictly exceeds the threshold."""
    if rate_threshold < 0:
        raise ConfigurationError(f"rain rate threshold must be >= 0, got {rate_threshold}")
    rates = np.asarray(rate_cube, dtype=np.float64)
    if not np.all(np.isfinite(rates)) or (rates < 0).any():
        raise DomainError("rain rates must be finite and non-negative")
    return (rates > rate_threshold).astype(np.uint8)


def leaderboard(scores: Iterable[ScoreRecord]) -> list[LeaderboardRow]:
    """Aggregate per-region scores into leaderboard rows.

    A year mean averages the regions of that year; the total mean averages
    the year means. Rows come back best first.
    """
    seen = set()
    by_sub: dict[str, dict[int, list[float]]] = defaultdict(lambda: defaultdict(list))
    for s in scores:
        key = (s.submission_name, s.region_id, s.year)
        if key in seen:
            raise DomainError(f"duplicate score for submission={key[0]!r} region={key[1]!r} year={key[2]}")
        seen.add(key)
        by_sub[s.submission_name][int(s.year)].append(float(s.iou))

    rows = []
    for name, years in by_sub.items():
        year_means = {y: float(np.mean(v)) for y, v in sorted(years.items())}
        total = float(np.mean(list(year_means.values())))
        rows.append(LeaderboardRow(name, total, year_means))
    rows.sort(key=lambda r: r.total_mean, reverse=True)
    return rows


def write_scores_csv(path, scores: Iterable[ScoreRecord]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", newline="") as f:
        w = csv.writer(f)
        w.writerow(SCORE_COLUMNS)
        for s in scores:
            w.writerow([s.submission_name, s.region_id, s.year, repr(float(s.iou))])
    return path


def read_scores_csv(path) -> list[ScoreRecord]:
    path = Path(path)
    if not path.exists():
        raise DomainError(f"score file not found: {path}")
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        missing = set(SCORE_COLUMNS) - set(reader.fieldnames or ())
        if missing:
            raise DomainError(f"{path} is missing columns {sorted(missing)}")
        return [
            ScoreRecord(row["region_id"], int(row["year"]), float(row["iou"]), row["submission_name"])
            for row in reader
        ]
