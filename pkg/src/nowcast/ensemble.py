"""Combining submissions: per-pixel majority vote and best-per-region assembly.

A submission maps ``(region_id, year, sample_index)`` to one predicted cube
of shape (32, H, W). On disk it is a directory holding ``{year}/{region}.pred.h5``
files, each with a ``submission`` dataset of shape (samples, 32, H, W).
"""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import h5py
import numpy as np

from nowcast.errors import ConfigurationError, DomainError
from nowcast.metrics import ScoreRecord, iou

__all__ = [
    "Submission",
    "expected_keys",
    "majority_vote",
    "best_per_region",
    "score_submission",
    "write_submission",
    "read_submission",
    "PAPER_VOTE_MEMBERS",
]

Key = tuple[str, int, int]

# the five models combined for the vote
PAPER_VOTE_MEMBERS = (
    "baseline_improved",
    "swin_repeat_interleave_adamw",
    "swin_repeat_interleave_adabelief",
    "swin_channel_conv_adamw",
    "swin_channel_conv_adabelief",
)


def expected_keys(regions: Iterable[str], years: Iterable[int], samples_per_region: int) -> frozenset[Key]:
    return frozenset((r, int(y), i) for r in regions for y in years for i in range(samples_per_region))


@dataclass
class Submission:
    name: str
    cubes: dict[Key, np.ndarray] = field(default_factory=dict)
    expected: frozenset | None = None

    @property
    def complete(self) -> bool:
        return self.expected is None or self.expected <= set(self.cubes)

    def missing(self) -> list[Key]:
        return [] if self.expected is None else sorted(self.expected - set(self.cubes))

    def region_years(self) -> list[tuple[str, int]]:
        return sorted({(r, y) for r, y, _ in self.cubes})

    def keys_for(self, region: str, year: int) -> list[Key]:
        return sorted(k for k in self.cubes if k[0] == region and k[1] == year)


def _describe(keys, limit: int = 5) -> str:
    keys = sorted(keys)
    shown = ", ".join(map(str, keys[:limit]))
    return shown + (f" ... ({len(keys)} total)" if len(keys) > limit else "")


def _check_aligned(subs: Sequence[Submission]) -> list[Key]:
    ref = set(subs[0].cubes)
    for s in subs:
        if not s.complete:
            raise DomainError(f"submission {s.name!r} is incomplete; missing {_describe(s.missing())}")
    for s in subs[1:]:
        keys = set(s.cubes)
        if keys != ref:
            raise DomainError(
                f"submission {s.name!r} is not aligned with {subs[0].name!r}: "
                f"missing {_describe(ref - keys) or 'none'}; extra {_describe(keys - ref) or 'none'}"
            )
    return sorted(ref)


def majority_vote(subs: Sequence[Submission], tie_break: str = "dry", name: str = "majority vote") -> Submission:
    """Per pixel, rain iff more members say rain than say dry.

    Exact ties (even member counts) go to ``tie_break``: ``dry`` or ``wet``.
    """
    if tie_break not in ("dry", "wet"):
        raise ConfigurationError(f"tie_break must be 'dry' or 'wet', got {tie_break!r}")
    if len(subs) < 2:
        raise DomainError(f"majority vote needs at least 2 submissions, got {len(subs)}")
    keys = _check_aligned(subs)
    n = len(subs)
    out = {}
    for k in keys:
        stack = [np.asarray(s.cubes[k]) for s in subs]
        shapes = {a.shape for a in stack}
        if len(shapes) != 1:
            raise DomainError(f"cube shapes differ for {k}: {sorted(shapes)}")
        for s, a in zip(subs, stack):
            if not np.isin(a, (0, 1)).all():
                raise DomainError(f"submission {s.name!r} has non-binary values at {k}; threshold it first")
        votes = np.sum(stack, axis=0, dtype=np.int32)
        wet = 2 * votes > n
        if tie_break == "wet":
            wet |= 2 * votes == n
        out[k] = wet.astype(np.uint8)
    return Submission(name, out, subs[0].expected)


def best_per_region(
    subs: Sequence[Submission], scores: Iterable[ScoreRecord], name: str = "take best prediction per region"
) -> Submission:
    """Copy each (region, year) from whichever submission scored best there.

    Ties go to the submission listed first.
    """
    if not subs:
        raise DomainError("best_per_region needs at least one submission")
    table = {(s.submission_name, s.region_id, int(s.year)): s.iou for s in scores}
    region_years = sorted({ry for s in subs for ry in s.region_years()})
    out = {}
    sources = {}
    for region, year in region_years:
        best = None
        best_score = -1.0
        for s in subs:
            key = (s.name, region, year)
            if key not in table:
                raise DomainError(f"no score for submission {s.name!r} in region {region!r} year {year}")
            if table[key] > best_score:
                best, best_score = s, table[key]
        keys = best.keys_for(region, year)
        if not keys:
            raise DomainError(f"submission {best.name!r} has no cubes for {region!r} {year}")
        for k in keys:
            out[k] = best.cubes[k]
        sources[(region, year)] = best.name
    merged = Submission(name, out, subs[0].expected)
    merged.sources = sources
    return merged


def score_submission(sub: Submission, truth: Submission, *, per_slot: bool = False) -> list[ScoreRecord]:
    """IoU per (region, year), pooled over that region's samples."""
    missing = set(truth.cubes) - set(sub.cubes)
    if missing:
        raise DomainError(f"submission {sub.name!r} lacks predictions for {_describe(missing)}")
    groups: dict[tuple[str, int], list[Key]] = defaultdict(list)
    for k in truth.cubes:
        groups[(k[0], k[1])].append(k)
    out = []
    for (region, year), keys in sorted(groups.items()):
        keys.sort()
        pred = np.stack([sub.cubes[k] for k in keys])
        gt = np.stack([truth.cubes[k] for k in keys])
        if per_slot:
            score = iou(pred.reshape(-1, *pred.shape[2:]), gt.reshape(-1, *gt.shape[2:]), per_slot=True)
        else:
            score = iou(pred, gt)
        out.append(ScoreRecord(region, year, float(score), sub.name))
    return out


def write_submission(root, sub: Submission, *, dtype: str | None = None) -> list[Path]:
    """One ``{year}/{region}.pred.h5`` per (region, year); samples in index order."""
    root = Path(root)
    paths = []
    for region, year in sub.region_years():
        keys = sub.keys_for(region, year)
        idx = [k[2] for k in keys]
        if idx != list(range(len(idx))):
            raise DomainError(f"sample indices for {region!r} {year} are not contiguous from 0")
        data = np.stack([sub.cubes[k] for k in keys])
        if dtype is None:
            dt = "uint8" if np.isin(data, (0, 1)).all() and not np.issubdtype(data.dtype, np.floating) else "float16"
        else:
            dt = dtype
        path = root / str(year) / f"{region}.pred.h5"
        path.parent.mkdir(parents=True, exist_ok=True)
        with h5py.File(path, "w") as f:
            f.create_dataset("submission", data=data.astype(dt), compression="gzip", track_times=False)
            f.attrs["name"] = sub.name
            f.attrs["region_id"] = region
            f.attrs["year"] = int(year)
        paths.append(path)
    return paths


def read_submission(root, name: str | None = None, *, threshold: float | None = None) -> Submission:
    """Load a submission directory.

    ``threshold`` binarizes probability cubes (strictly above) while reading.
    """
    root = Path(root)
    files = sorted(root.glob("*/*.pred.h5"))
    if not files:
        raise DomainError(f"no '*/*.pred.h5' files under {root}")
    cubes = {}
    stored_name = None
    for path in files:
        with h5py.File(path, "r") as f:
            if "submission" not in f:
                raise DomainError(f"{path} has no 'submission' dataset")
            data = f["submission"][()]
            region = str(f.attrs.get("region_id", path.name[: -len(".pred.h5")]))
            year = int(f.attrs.get("year", path.parent.name))
            stored_name = stored_name or (str(f.attrs["name"]) if "name" in f.attrs else None)
        if threshold is not None and np.issubdtype(data.dtype, np.floating):
            data = (data.astype(np.float32) > threshold).astype(np.uint8)
        for i, cube in enumerate(data):
            cubes[(region, year, i)] = cube
    return Submission(name or stored_name or root.name, cubes)
