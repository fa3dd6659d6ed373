"""Tensor contract, synthetic event generator, datasets and climatology.

Shapes follow the competition layout: a context of 11 bands x 4 steps over a
``side x side`` satellite crop, and 32 binary radar masks over a ``side x side``
radar crop. The radar crop covers only a ``sat_patch_side`` square at the
center of the satellite crop, which is ``resolution_ratio`` times coarser.
"""

from __future__ import annotations

import dataclasses
import json
import os
import tempfile
from dataclasses import dataclass
from datetime import datetime, timedelta
from pathlib import Path
from typing import Iterator, Sequence

import h5py
import numpy as np
from scipy import ndimage

from nowcast.errors import ConfigurationError, DomainError

__all__ = [
    "GridSpec",
    "DEFAULT_GRID",
    "DESK_GRID",
    "ContextTensor",
    "RainCube",
    "ProbCube",
    "ClimatologyMap",
    "NowcastDataset",
    "MergedDataset",
    "generate_synthetic_event",
    "synthesize_dataset",
    "merge_train_val",
    "compute_climatology",
    "radar_to_sat_coords",
    "write_container",
    "read_container",
    "store_climatology",
    "load_climatology",
]


@dataclass(frozen=True)
class GridSpec:
    in_bands: int = 11
    in_steps: int = 4
    out_steps: int = 32
    side: int = 252
    sat_patch_side: int = 42
    resolution_ratio: int = 6
    step_minutes: int = 15

    def validate(self) -> "GridSpec":
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool) or value <= 0:
                raise ConfigurationError(f"GridSpec.{f.name} must be a positive integer, got {value!r}")
        if self.side != self.sat_patch_side * self.resolution_ratio:
            raise ConfigurationError(
                f"GridSpec requires side == sat_patch_side * resolution_ratio, "
                f"got {self.side} != {self.sat_patch_side} * {self.resolution_ratio}"
            )
        if self.sat_patch_side > self.side:
            raise ConfigurationError("sat_patch_side cannot exceed side")
        return self

    @property
    def context_shape(self) -> tuple[int, int, int, int]:
        return (self.in_bands, self.in_steps, self.side, self.side)

    @property
    def target_shape(self) -> tuple[int, int, int]:
        return (self.out_steps, self.side, self.side)

    @property
    def sat_offset(self) -> int:
        return (self.side - self.sat_patch_side) // 2

    def to_json(self) -> str:
        return json.dumps(dataclasses.asdict(self), sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GridSpec":
        return cls(**json.loads(text)).validate()

    @classmethod
    def named(cls, name: str) -> "GridSpec":
        try:
            return {"default": DEFAULT_GRID, "full": DEFAULT_GRID, "desk": DESK_GRID}[name]
        except KeyError:
            raise ConfigurationError(f"unknown grid preset {name!r} (expected 'full' or 'desk')") from None


DEFAULT_GRID = GridSpec()
DESK_GRID = GridSpec(side=64, sat_patch_side=16, resolution_ratio=4)


def _check_shape(name: str, values: np.ndarray, expected: tuple[int, ...]) -> None:
    if values.shape != expected:
        raise DomainError(f"{name} has shape {values.shape}, expected {expected}")


@dataclass
class ContextTensor:
    values: np.ndarray  # (band, time, height, width)
    region_id: str = "synth"
    year: int = 2019
    timestamp: str = ""

    def validate(self, grid: GridSpec = DEFAULT_GRID) -> "ContextTensor":
        _check_shape("context", self.values, grid.context_shape)
        if not np.all(np.isfinite(self.values)):
            raise DomainError("context contains non-finite values")
        return self


@dataclass
class RainCube:
    values: np.ndarray  # (time, height, width), uint8 in {0, 1}
    region_id: str = "synth"
    year: int = 2019
    timestamp: str = ""

    def validate(self, grid: GridSpec = DEFAULT_GRID) -> "RainCube":
        _check_shape("rain cube", self.values, grid.target_shape)
        if not np.isin(self.values, (0, 1)).all():
            raise DomainError("rain cube values must be exactly 0 or 1")
        return self


@dataclass
class ProbCube:
    values: np.ndarray  # (time, height, width), float in [0, 1]
    region_id: str = "synth"
    year: int = 2019
    timestamp: str = ""

    def validate(self, grid: GridSpec = DEFAULT_GRID) -> "ProbCube":
        _check_shape("probability cube", self.values, grid.target_shape)
        v = self.values
        if not (np.all(np.isfinite(v)) and v.min(initial=0.0) >= 0.0 and v.max(initial=0.0) <= 1.0):
            raise DomainError("probabilities must lie in [0, 1]")
        return self


@dataclass
class ClimatologyMap:
    pixel_freq: np.ndarray  # (height, width)
    scalar_mean: float
    scalar_max: float
    split: str
    region_id: str
    year: int


# ---------------------------------------------------------------------------
# synthetic events

# Per-band response of the fake radiometer to the coarse rain field. Signs
# alternate so that some bands brighten over rain (VIS-like) and some darken
# (IR brightness temperature over cold cloud tops).
_BAND_RNG = np.random.default_rng(20221111)
_BAND_GAIN = _BAND_RNG.uniform(0.5, 1.5, 11) * np.where(np.arange(11) % 2 == 0, 1.0, -1.0)
_BAND_BIAS = _BAND_RNG.uniform(-0.5, 0.5, 11)
_BAND_BLUR = _BAND_RNG.uniform(0.0, 1.5, 11)
_BAND_NOISE = 0.05


def _band_table(n_bands: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.arange(n_bands) % len(_BAND_GAIN)
    return _BAND_GAIN[idx], _BAND_BIAS[idx], _BAND_BLUR[idx]


def _blob_field(
    ys: np.ndarray,
    xs: np.ndarray,
    centers: np.ndarray,
    sigma: np.ndarray,
    amp: np.ndarray,
) -> np.ndarray:
    """Sum of separable Gaussian blobs.

    ``centers`` is (cells, steps, 2); returns (steps, len(ys), len(xs)).
    """
    if len(amp) == 0:
        return np.zeros((centers.shape[1], len(ys), len(xs)))
    s2 = 2.0 * sigma[:, None, None] ** 2
    gy = np.exp(-((ys[None, None, :] - centers[:, :, 0, None]) ** 2) / s2)
    gx = np.exp(-((xs[None, None, :] - centers[:, :, 1, None]) ** 2) / s2)
    return np.einsum("kt,kty,ktx->tyx", amp, gy, gx)


def generate_synthetic_event(
    seed: int,
    grid: GridSpec = DEFAULT_GRID,
    motion: Sequence[float] = (1.0, 0.5),
    n_cells: int = 3,
    *,
    decay: float = 0.0,
    rain_threshold: float = 0.5,
    region_id: str = "synth",
    year: int = 2019,
) -> tuple[ContextTensor, RainCube]:
    """Advect Gaussian rain cells across the region and observe them twice.

    The radar target thresholds the rain field on the fine grid for the 32
    steps that follow the 4 context steps. The context bands are blurred,
    noisy, affinely rescaled views of the same field sampled on the coarse
    satellite grid, whose central ``sat_patch_side`` square is the radar crop.

    ``motion`` is (dy, dx) in radar pixels per step. ``decay`` shrinks cell
    amplitudes by ``exp(-decay * step)``.
    """
    grid.validate()
    if n_cells < 0:
        raise DomainError(f"n_cells must be >= 0, got {n_cells}")
    rng = np.random.default_rng(seed)
    side, ratio = grid.side, grid.resolution_ratio
    n_steps = grid.in_steps + grid.out_steps
    motion = np.asarray(motion, dtype=np.float64).reshape(2)

    # start positions spread upstream so cells cross the radar crop mid-event
    travel = motion * (n_steps - 1)
    start = rng.uniform(-0.25 * side, 1.25 * side, size=(n_cells, 2)) - travel / 2
    sigma = rng.uniform(side / 16, side / 6, size=n_cells)
    amp = rng.uniform(1.0, 3.0, size=n_cells)

    steps = np.arange(n_steps, dtype=np.float64)
    centers = start[:, None, :] + steps[None, :, None] * motion[None, None, :]
    amp_t = amp[:, None] * np.exp(-decay * steps)[None, :]

    fine = np.arange(side, dtype=np.float64)
    rain = _blob_field(fine, fine, centers[:, grid.in_steps:], sigma, amp_t[:, grid.in_steps:])
    target = (rain > rain_threshold).astype(np.uint8)

    # coarse pixel centers expressed in radar pixel units
    coarse = (np.arange(side) - grid.sat_offset) * ratio + (ratio - 1) / 2.0
    coarse_sigma = np.sqrt(sigma**2 + ratio**2 / 12.0)
    seen = _blob_field(
        coarse, coarse, centers[:, : grid.in_steps], coarse_sigma, amp_t[:, : grid.in_steps]
    )
    gain, bias, blur = _band_table(grid.in_bands)
    context = np.empty(grid.context_shape, dtype=np.float32)
    for b in range(grid.in_bands):
        for t in range(grid.in_steps):
            view = ndimage.gaussian_filter(seen[t], blur[b]) if blur[b] > 0 else seen[t]
            noise = rng.normal(0.0, _BAND_NOISE, size=view.shape)
            context[b, t] = gain[b] * view + bias[b] + noise

    stamp = (datetime(year, 1, 1) + timedelta(minutes=grid.step_minutes * (seed % 35000))).isoformat()
    return (
        ContextTensor(context, region_id=region_id, year=year, timestamp=stamp),
        RainCube(target, region_id=region_id, year=year, timestamp=stamp),
    )


# ---------------------------------------------------------------------------
# datasets


class _DatasetBase:
    grid: GridSpec

    def __len__(self) -> int:
        raise NotImplementedError

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        raise NotImplementedError

    def sample_id(self, i: int) -> str:
        raise NotImplementedError

    def sample_meta(self, i: int) -> tuple[str, int, str]:
        """(region_id, year, split) of sample ``i``."""
        raise NotImplementedError

    def sample_ids(self) -> list[str]:
        return [self.sample_id(i) for i in range(len(self))]

    def target(self, i: int) -> np.ndarray:
        return self[i][1]

    def iter_targets(self) -> Iterator[np.ndarray]:
        for i in range(len(self)):
            yield self.target(i)

    def sample(self, i: int) -> tuple[ContextTensor, RainCube]:
        ctx, tgt = self[i]
        region, year, _ = self.sample_meta(i)
        stamp = self.sample_id(i)
        return ContextTensor(ctx, region, year, stamp), RainCube(tgt, region, year, stamp)

    def close(self) -> None:
        """Release the file handle held by a lazily read dataset."""
        f = getattr(self, "_file", None)
        if f is not None:
            f.close()
            self._file = None

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        self.close()


class NowcastDataset(_DatasetBase):
    """Samples of one (region, year, split), backed by arrays or HDF5 datasets."""

    def __init__(
        self,
        context,
        target,
        grid: GridSpec = DEFAULT_GRID,
        region_id: str = "synth",
        year: int = 2019,
        split: str = "train",
        sample_ids: Sequence[str] | None = None,
    ):
        grid.validate()
        if len(context) != len(target):
            raise DomainError(f"context has {len(context)} samples but target has {len(target)}")
        if tuple(context.shape[1:]) != grid.context_shape:
            raise DomainError(f"context samples have shape {tuple(context.shape[1:])}, expected {grid.context_shape}")
        if tuple(target.shape[1:]) != grid.target_shape:
            raise DomainError(f"target samples have shape {tuple(target.shape[1:])}, expected {grid.target_shape}")
        if sample_ids is not None and len(sample_ids) != len(context):
            raise DomainError("sample_ids length does not match the number of samples")
        self.context = context
        self.target_values = target
        self.grid = grid
        self.region_id = region_id
        self.year = int(year)
        self.split = split
        self._ids = None if sample_ids is None else [str(s) for s in sample_ids]

    def __len__(self) -> int:
        return len(self.context)

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        if not 0 <= i < len(self):
            raise IndexError(i)
        return np.asarray(self.context[i], dtype=np.float32), np.asarray(self.target_values[i], dtype=np.uint8)

    def target(self, i: int) -> np.ndarray:
        return np.asarray(self.target_values[i], dtype=np.uint8)

    def sample_id(self, i: int) -> str:
        if self._ids is not None:
            return self._ids[i]
        return f"{self.region_id}/{self.year}/{self.split}/{i:06d}"

    def sample_meta(self, i: int) -> tuple[str, int, str]:
        return self.region_id, self.year, self.split

    def __repr__(self) -> str:
        return f"NowcastDataset({self.region_id!r}, {self.year}, {self.split!r}, n={len(self)})"


class MergedDataset(_DatasetBase):
    """Concatenation of datasets without copying sample arrays."""

    def __init__(self, parts: Sequence[_DatasetBase]):
        if not parts:
            raise DomainError("cannot merge zero datasets")
        grid = parts[0].grid
        for p in parts[1:]:
            if p.grid != grid:
                raise ConfigurationError(f"cannot merge datasets with different grids: {grid} vs {p.grid}")
        self.parts = list(parts)
        self.grid = grid
        self._offsets = np.cumsum([0] + [len(p) for p in parts])

    def close(self) -> None:
        for p in self.parts:
            p.close()

    def __len__(self) -> int:
        return int(self._offsets[-1])

    def _locate(self, i: int) -> tuple[_DatasetBase, int]:
        if not 0 <= i < len(self):
            raise IndexError(i)
        k = int(np.searchsorted(self._offsets, i, side="right")) - 1
        return self.parts[k], i - int(self._offsets[k])

    def __getitem__(self, i: int) -> tuple[np.ndarray, np.ndarray]:
        part, j = self._locate(i)
        return part[j]

    def target(self, i: int) -> np.ndarray:
        part, j = self._locate(i)
        return part.target(j)

    def sample_id(self, i: int) -> str:
        part, j = self._locate(i)
        return part.sample_id(j)

    def sample_meta(self, i: int) -> tuple[str, int, str]:
        part, j = self._locate(i)
        return part.sample_meta(j)


def synthesize_dataset(
    n_samples: int,
    grid: GridSpec = DEFAULT_GRID,
    *,
    seed: int = 0,
    region_id: str = "synth",
    year: int = 2019,
    split: str = "train",
    motion: Sequence[float] | None = None,
    n_cells: int | None = None,
) -> NowcastDataset:
    """Stack ``n_samples`` synthetic events into an in-memory dataset.

    Motion and cell count vary per event unless fixed by the caller.
    """
    rng = np.random.default_rng(seed)
    ctx = np.empty((n_samples, *grid.context_shape), dtype=np.float32)
    tgt = np.empty((n_samples, *grid.target_shape), dtype=np.uint8)
    ids = []
    for i in range(n_samples):
        event_seed = int(rng.integers(0, 2**31 - 1))
        mv = motion if motion is not None else rng.uniform(-1.0, 1.0, 2) * grid.side / 64
        nc = n_cells if n_cells is not None else int(rng.integers(1, 5))
        c, r = generate_synthetic_event(event_seed, grid, mv, nc, region_id=region_id, year=year)
        ctx[i], tgt[i] = c.values, r.values
        ids.append(f"{region_id}/{year}/{split}/{i:06d}")
    return NowcastDataset(ctx, tgt, grid, region_id, year, split, ids)


def merge_train_val(train: _DatasetBase, val: _DatasetBase) -> _DatasetBase:
    """Treat the validation samples as extra training samples (train first)."""
    if train.grid != val.grid:
        raise ConfigurationError(f"cannot merge datasets with different grids: {train.grid} vs {val.grid}")
    if len(val) == 0:
        return train
    return MergedDataset([train, val])


def compute_climatology(dataset: _DatasetBase, split: str | None = None) -> ClimatologyMap:
    n = len(dataset)
    if n == 0:
        raise DomainError("cannot compute climatology of an empty dataset")
    counts = np.zeros((dataset.grid.side, dataset.grid.side), dtype=np.int64)
    ratios = np.empty(n, dtype=np.float64)
    regions = set()
    for i, tgt in enumerate(dataset.iter_targets()):
        counts += tgt.sum(axis=0, dtype=np.int64)
        ratios[i] = tgt.mean(dtype=np.float64)
        regions.add(dataset.sample_meta(i)[0])
    region, year, own_split = dataset.sample_meta(0)
    return ClimatologyMap(
        pixel_freq=counts / float(n * dataset.grid.out_steps),
        scalar_mean=float(ratios.mean()),
        scalar_max=float(ratios.max()),
        split=split or own_split,
        region_id=region if len(regions) == 1 else "mixed",
        year=year,
    )


def radar_to_sat_coords(h: int, w: int, grid: GridSpec = DEFAULT_GRID) -> tuple[int, int]:
    """Map a radar pixel to the satellite pixel covering it."""
    if not (0 <= h < grid.side and 0 <= w < grid.side):
        raise DomainError(f"radar coordinate ({h}, {w}) outside [0, {grid.side})")
    off = grid.sat_offset
    r = grid.resolution_ratio
    return off + h // r, off + w // r


# ---------------------------------------------------------------------------
# container files


def _atomic_h5(path: Path):
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(prefix=path.name, suffix=".tmp", dir=path.parent)
    os.close(fd)
    return tmp


def write_container(path, dataset: NowcastDataset, *, context_dtype: str = "float32") -> Path:
    """Write one (region, year, split) file; replaces ``path`` atomically."""
    if context_dtype not in ("float16", "float32"):
        raise ConfigurationError(f"context dtype must be float16 or float32, got {context_dtype!r}")
    path = Path(path)
    tmp = _atomic_h5(path)
    n = len(dataset)
    g = dataset.grid
    try:
        with h5py.File(tmp, "w", track_order=False) as f:
            ctx = f.create_dataset(
                "context", shape=(n, *g.context_shape), dtype=context_dtype,
                chunks=(1, *g.context_shape) if n else None, track_times=False,
            )
            tgt = f.create_dataset(
                "target", shape=(n, *g.target_shape), dtype="uint8",
                chunks=(1, *g.target_shape) if n else None, track_times=False,
            )
            for i in range(n):
                c, t = dataset[i]
                ctx[i] = c
                tgt[i] = t
            f.create_dataset(
                "sample_ids", data=np.array(dataset.sample_ids(), dtype=h5py.string_dtype()),
                track_times=False,
            )
            f.attrs["region_id"] = dataset.region_id
            f.attrs["year"] = dataset.year
            f.attrs["split"] = dataset.split
            f.attrs["grid_spec"] = g.to_json()
        os.replace(tmp, path)
    finally:
        if os.path.exists(tmp):
            os.unlink(tmp)
    return path


def read_container(path, *, lazy: bool = False) -> NowcastDataset:
    """Open a dataset file. ``lazy`` keeps the file open and reads per sample."""
    path = Path(path)
    if not path.exists():
        raise DomainError(f"dataset file not found: {path}")
    f = h5py.File(path, "r")
    try:
        grid = GridSpec.from_json(f.attrs["grid_spec"])
        ids = [s.decode() if isinstance(s, bytes) else str(s) for s in f["sample_ids"][()]]
        if lazy:
            ctx, tgt = f["context"], f["target"]
        else:
            ctx = f["context"][()].astype(np.float32)
            tgt = f["target"][()]
        ds = NowcastDataset(
            ctx, tgt, grid, str(f.attrs["region_id"]), int(f.attrs["year"]), str(f.attrs["split"]), ids
        )
    except KeyError as exc:
        f.close()
        raise DomainError(f"{path} is not a dataset container: missing {exc}") from None
    except Exception:
        f.close()
        raise
    if lazy:
        ds._file = f  # keeps the handle alive
    else:
        f.close()
    return ds


def store_climatology(path, clim: ClimatologyMap) -> None:
    with h5py.File(path, "a") as f:
        grp = f.require_group("climatology")
        if clim.split in grp:
            del grp[clim.split]
        g = grp.create_group(clim.split)
        g.create_dataset("pixel_freq", data=clim.pixel_freq, track_times=False)
        g.attrs["scalar_mean"] = clim.scalar_mean
        g.attrs["scalar_max"] = clim.scalar_max
        g.attrs["region_id"] = clim.region_id
        g.attrs["year"] = clim.year


def load_climatology(path, split: str) -> ClimatologyMap:
    with h5py.File(path, "r") as f:
        try:
            g = f["climatology"][split]
        except KeyError:
            raise DomainError(f"no {split!r} climatology stored in {path}") from None
        return ClimatologyMap(
            pixel_freq=g["pixel_freq"][()],
            scalar_mean=float(g.attrs["scalar_mean"]),
            scalar_max=float(g.attrs["scalar_max"]),
            split=split,
            region_id=str(g.attrs["region_id"]),
            year=int(g.attrs["year"]),
        )
