import h5py
import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from nowcast.data import ClimatologyMap, ProbCube
from nowcast.errors import ConfigurationError, DomainError
from nowcast.metrics import iou
from nowcast.postprocess import (
    DEFAULT_SWEEP,
    CalibrationMask,
    apply_calibration,
    apply_threshold,
    build_calibration,
    load_calibration,
    store_calibration,
    sweep_threshold,
)


def _clim(freq, split="train"):
    freq = np.asarray(freq, float)
    return ClimatologyMap(freq, float(freq.mean()), float(freq.max()), split, "r", 2019)


def test_threshold_examples():
    assert apply_threshold(np.array([0.5])).values.tolist() == [0]
    assert apply_threshold(np.array([0.6])).values.tolist() == [1]
    got = apply_threshold(np.array([0.1, 0.3, 0.6, 0.9]), 0.65).values
    assert got.tolist() == [0, 0, 0, 1]
    cube = ProbCube(np.full((2, 3, 3), 0.7, np.float32), "roxi_0004", 2020)
    out = apply_threshold(cube)
    assert out.region_id == "roxi_0004" and out.year == 2020 and out.values.dtype == np.uint8


@pytest.mark.parametrize("tau", [0.0, 1.0, -0.1, 1.5])
def test_threshold_range(tau):
    with pytest.raises(ConfigurationError):
        apply_threshold(np.zeros(3), tau)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1), st.floats(0.01, 0.98), st.floats(0.0, 0.2))
def test_threshold_monotone(seed, tau, step):
    p = np.random.default_rng(seed).random((4, 5, 5))
    hi = min(tau + step, 0.99)
    assert apply_threshold(p, hi).values.sum() <= apply_threshold(p, tau).values.sum()


def test_sweep_single_value_grid():
    p = [np.random.default_rng(0).random((2, 4, 4))]
    g = [(p[0] > 0.4).astype(np.uint8)]
    best, curve = sweep_threshold(p, g, [0.4])
    assert best == 0.4 and curve == [(0.4, 1.0)]


def test_sweep_ties_go_to_smallest():
    # binary probabilities equal to the truth: every threshold scores 1
    gt = (np.random.default_rng(1).random((3, 4, 4)) > 0.5).astype(np.uint8)
    best, curve = sweep_threshold([gt.astype(float)], [gt], [0.6, 0.3, 0.45])
    assert best == 0.3 and all(s == 1.0 for _, s in curve)
    assert [t for t, _ in curve] == [0.3, 0.45, 0.6]


def test_sweep_finds_generating_threshold():
    p = np.random.default_rng(2).random((4, 8, 8))
    gt = (p > 0.5).astype(np.uint8)
    best, curve = sweep_threshold([p], [gt])
    assert best == 0.5
    assert dict(curve)[0.5] == 1.0
    assert [t for t, _ in curve] == list(DEFAULT_SWEEP)


def test_sweep_matches_direct_iou():
    rng = np.random.default_rng(3)
    p = [rng.random((2, 4, 4)) for _ in range(3)]
    g = [(rng.random((2, 4, 4)) > 0.6).astype(np.uint8) for _ in range(3)]
    _, curve = sweep_threshold(p, g, [0.25, 0.55])
    for tau, score in curve:
        assert score == iou(np.stack([(x > tau) for x in p]), np.stack(g))


def test_sweep_errors():
    with pytest.raises(DomainError):
        sweep_threshold([np.zeros(2)], [])
    with pytest.raises(ConfigurationError):
        sweep_threshold([np.zeros(2)], [np.zeros(2)], [])


def test_calibration_examples():
    same = build_calibration(_clim(np.full((2, 2), 0.3)), _clim(np.full((2, 2), 0.3), "val"))
    np.testing.assert_allclose(same.factor, 1.0)
    up = build_calibration(_clim([[0.05]]), _clim([[0.10]], "val"))
    assert up.factor[0, 0] == pytest.approx((0.10 + 1e-4) / (0.05 + 1e-4))
    assert build_calibration(_clim([[0.01]]), _clim([[0.10]], "val")).factor[0, 0] == 2.0
    down = build_calibration(_clim([[0.10]]), _clim([[0.05]], "val"))
    assert down.factor[0, 0] == pytest.approx(0.5, abs=1e-3)
    dry = build_calibration(_clim([[0.0]]), _clim([[0.0]], "val"))
    assert dry.factor[0, 0] == 1.0


def test_calibration_difference_mode():
    m = build_calibration(_clim([[0.2, 0.5]]), _clim([[0.4, 0.1]], "val"), mode="difference")
    np.testing.assert_allclose(m.factor, [[1.2, 0.6]])
    with pytest.raises(ConfigurationError):
        build_calibration(_clim([[0.2]]), _clim([[0.4]], "val"), mode="log")


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_calibration_direction(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.random((3, 3)), rng.random((3, 3))
    f = build_calibration(_clim(a), _clim(b, "val")).factor
    assert ((f >= 0.5) & (f <= 2.0)).all()
    assert (f[a > b] <= 1.0).all() and (f[a < b] >= 1.0).all()


def test_apply_calibration():
    mask = CalibrationMask(np.array([[2.0, 0.5]]))
    out = apply_calibration(np.array([[[0.6, 0.6]]]), mask)
    np.testing.assert_allclose(out, [[[1.0, 0.3]]])
    cube = apply_calibration(ProbCube(np.full((1, 1, 2), 0.2), "x", 2020), mask)
    assert cube.region_id == "x"
    with pytest.raises(DomainError):
        apply_calibration(np.zeros((1, 3, 3)), mask)


def test_calibration_mask_checks():
    with pytest.raises(DomainError):
        CalibrationMask(np.array([[3.0]]))
    with pytest.raises(ConfigurationError):
        CalibrationMask(np.array([[1.0]]), (2.0, 0.5))


def test_calibration_store_round_trip(tmp_path):
    mask = build_calibration(_clim(np.random.default_rng(0).random((4, 4))), _clim(np.full((4, 4), 0.2), "val"))
    path = tmp_path / "c.h5"
    store_calibration(path, mask)
    store_calibration(path, mask)
    back = load_calibration(path)
    assert np.array_equal(back.factor, mask.factor) and back.clip_range == mask.clip_range
    h5py.File(tmp_path / "other.h5", "w").close()
    with pytest.raises(DomainError):
        load_calibration(tmp_path / "other.h5")
