import hashlib

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nowcast.data import (
    DEFAULT_GRID,
    DESK_GRID,
    GridSpec,
    MergedDataset,
    NowcastDataset,
    compute_climatology,
    generate_synthetic_event,
    load_climatology,
    merge_train_val,
    radar_to_sat_coords,
    read_container,
    store_climatology,
    synthesize_dataset,
    write_container,
)
from nowcast.errors import ConfigurationError, DomainError


def test_full_grid_shapes():
    ctx, tgt = generate_synthetic_event(7)
    assert ctx.values.shape == (11, 4, 252, 252)
    assert tgt.values.shape == (32, 252, 252)
    assert ctx.values.dtype == np.float32 and tgt.values.dtype == np.uint8
    ctx.validate(DEFAULT_GRID)
    tgt.validate(DEFAULT_GRID)


def test_no_cells_no_rain():
    _, tgt = generate_synthetic_event(3, DESK_GRID, n_cells=0)
    assert not tgt.values.any()


def test_static_cell_keeps_its_mask():
    _, tgt = generate_synthetic_event(7, motion=(0, 0), n_cells=1)
    assert tgt.values[0].any()
    assert np.array_equal(tgt.values[31], tgt.values[0])


def test_moving_cell_moves():
    _, tgt = generate_synthetic_event(7, DESK_GRID, motion=(1.0, 0.0), n_cells=1)
    rows = [np.nonzero(t.any(axis=1))[0].mean() for t in tgt.values if t.any()]
    assert rows[-1] > rows[0]


def test_generator_is_deterministic():
    a = generate_synthetic_event(5, DESK_GRID)
    b = generate_synthetic_event(5, DESK_GRID)
    c = generate_synthetic_event(6, DESK_GRID)
    assert np.array_equal(a[0].values, b[0].values) and np.array_equal(a[1].values, b[1].values)
    assert not np.array_equal(a[0].values, c[0].values)


def test_context_sees_the_rain():
    # every band responds to the rain field, with the sign of its gain
    ctx, _ = generate_synthetic_event(2, DESK_GRID, motion=(0, 0), n_cells=4)
    v = ctx.values
    assert np.isfinite(v).all()
    assert (v.std(axis=(1, 2, 3)) > 0).all()


def test_grid_validation():
    with pytest.raises(ConfigurationError):
        GridSpec(side=100, sat_patch_side=42, resolution_ratio=6).validate()
    with pytest.raises(ConfigurationError):
        GridSpec(side=252, sat_patch_side=254, resolution_ratio=1).validate()
    assert GridSpec.named("desk") == DESK_GRID
    assert GridSpec.from_json(DEFAULT_GRID.to_json()) == DEFAULT_GRID
    assert DEFAULT_GRID.sat_offset == 105


@pytest.mark.parametrize("hw, want", [((0, 0), (105, 105)), ((251, 251), (146, 146)), ((126, 126), (126, 126))])
def test_radar_to_sat(hw, want):
    assert radar_to_sat_coords(*hw) == want


def test_radar_to_sat_out_of_range():
    with pytest.raises(DomainError):
        radar_to_sat_coords(252, 0)


@given(st.integers(0, 251), st.integers(0, 251))
def test_radar_pixel_lands_in_centre_patch(h, w):
    sh, sw = radar_to_sat_coords(h, w)
    assert 105 <= sh < 147 and 105 <= sw < 147


def _tiny(n, split, seed=0):
    return synthesize_dataset(n, DESK_GRID, seed=seed, region_id="roxi_0004", year=2019, split=split)


def test_merge_train_val_order():
    train, val = _tiny(10, "train"), _tiny(3, "val", seed=1)
    merged = merge_train_val(train, val)
    assert len(merged) == 13
    assert merged.sample_ids()[-3:] == val.sample_ids()
    assert np.array_equal(merged[11][1], val[1][1])
    assert merged.sample_meta(12)[2] == "val"


def test_merge_with_empty_val_is_identity():
    train = _tiny(2, "train")
    assert merge_train_val(train, _tiny(0, "val")) is train


def test_merge_grid_mismatch():
    a = _tiny(1, "train")
    b = synthesize_dataset(1, GridSpec(side=32, sat_patch_side=8, resolution_ratio=4), split="val")
    with pytest.raises(ConfigurationError):
        merge_train_val(a, b)


def _fixed(targets):
    n = len(targets)
    ctx = np.zeros((n, *DESK_GRID.context_shape), np.float32)
    return NowcastDataset(ctx, np.asarray(targets, np.uint8), DESK_GRID, "r", 2019, "train")


def test_climatology_examples():
    shape = DESK_GRID.target_shape
    z = compute_climatology(_fixed([np.zeros(shape)]))
    assert z.scalar_mean == 0 and not z.pixel_freq.any()
    o = compute_climatology(_fixed([np.ones(shape)]))
    assert o.scalar_mean == 1 and (o.pixel_freq == 1).all()
    h = compute_climatology(_fixed([np.ones(shape), np.zeros(shape)]))
    assert h.scalar_mean == 0.5 and (h.pixel_freq == 0.5).all() and h.scalar_max == 1.0


def test_climatology_oracle(desk_dataset):
    clim = compute_climatology(desk_dataset)
    stack = np.stack([desk_dataset[i][1] for i in range(len(desk_dataset))]).astype(float)
    np.testing.assert_allclose(clim.pixel_freq, stack.mean(axis=(0, 1)))
    assert clim.scalar_mean == pytest.approx(stack.mean())


def test_climatology_of_mixed_regions():
    a = _tiny(1, "train")
    b = synthesize_dataset(1, DESK_GRID, region_id="roxi_0005", year=2019)
    assert compute_climatology(MergedDataset([a, b])).region_id == "mixed"


def test_container_round_trip(tmp_path, desk_dataset):
    path = write_container(tmp_path / "2019" / "roxi_0004.train.h5", desk_dataset)
    for lazy in (False, True):
        with read_container(path, lazy=lazy) as back:
            assert len(back) == len(desk_dataset) and back.grid == DESK_GRID
            assert back.sample_ids() == desk_dataset.sample_ids()
            for i in range(len(back)):
                assert np.array_equal(back[i][0], desk_dataset[i][0])
                assert np.array_equal(back[i][1], desk_dataset[i][1])
    clim = compute_climatology(desk_dataset)
    store_climatology(path, clim)
    got = load_climatology(path, "train")
    assert np.array_equal(got.pixel_freq, clim.pixel_freq) and got.scalar_mean == clim.scalar_mean
    with pytest.raises(DomainError):
        load_climatology(path, "val")


def test_container_bytes_are_reproducible(tmp_path, desk_dataset):
    a = write_container(tmp_path / "a.h5", desk_dataset)
    b = write_container(tmp_path / "b.h5", desk_dataset)
    digest = [hashlib.sha256(p.read_bytes()).hexdigest() for p in (a, b)]
    assert digest[0] == digest[1]


def test_read_missing_container(tmp_path):
    with pytest.raises(DomainError):
        read_container(tmp_path / "nope.h5")


def test_dataset_shape_checks():
    with pytest.raises(DomainError):
        NowcastDataset(np.zeros((1, 11, 4, 8, 8), np.float32), np.zeros((1, 32, 64, 64), np.uint8), DESK_GRID)


@settings(max_examples=10, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_targets_are_binary(seed):
    _, tgt = generate_synthetic_event(seed, DESK_GRID)
    assert set(np.unique(tgt.values)) <= {0, 1}
