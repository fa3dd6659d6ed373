import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from nowcast.errors import ConfigurationError, DomainError
from nowcast.metrics import ScoreRecord, binarize_rate, iou, leaderboard, read_scores_csv, write_scores_csv

masks = arrays(np.uint8, (3, 4, 4), elements=st.integers(0, 1))


def test_iou_examples():
    a = np.zeros((2, 2), np.uint8)
    a[0, 0] = a[0, 1] = 1
    g = np.zeros((2, 2), np.uint8)
    g[0, 1] = g[1, 1] = g[1, 0] = 1
    assert iou(a, g) == 0.25
    assert iou(g, g) == 1.0
    assert iou(a, 1 - a) == 0.0
    assert iou(np.zeros((4, 4)), np.zeros((4, 4))) == 1.0


def test_iou_per_slot():
    p = np.zeros((2, 2, 2), np.uint8)
    g = np.zeros((2, 2, 2), np.uint8)
    p[0, 0, 0] = g[0, 0, 0] = 1
    p[1, 1, 1] = 1
    g[1, 0, 0] = 1
    assert iou(p, g) == pytest.approx(1 / 3)
    assert iou(p, g, per_slot=True) == pytest.approx(0.5)


def test_iou_rejects_bad_input():
    with pytest.raises(DomainError):
        iou(np.zeros((2, 2)), np.zeros((3, 3)))
    with pytest.raises(DomainError):
        iou(np.full((2, 2), 0.5), np.zeros((2, 2)))


@given(masks, masks)
def test_iou_symmetric_and_bounded(a, b):
    v = iou(a, b)
    assert v == iou(b, a)
    assert 0.0 <= v <= 1.0


@given(masks)
def test_iou_self_is_one(a):
    assert iou(a, a) == 1.0


def test_binarize_rate_strict():
    assert binarize_rate([0.1, 0.2, 0.3], 0.2).tolist() == [0, 0, 1]
    assert binarize_rate([0.5, 1.0], 0.0).tolist() == [1, 1]
    assert binarize_rate([0.0, 0.0], 0.0).tolist() == [0, 0]
    with pytest.raises(ConfigurationError):
        binarize_rate([1.0], -1)
    with pytest.raises(DomainError):
        binarize_rate([np.nan], 0.2)


def test_leaderboard_arithmetic():
    rows = leaderboard([ScoreRecord("r", 2019, 0.7, "x")])
    assert rows[0].total_mean == 0.7
    rows = leaderboard([ScoreRecord("a", 2019, 0.1, "x"), ScoreRecord("b", 2019, 0.3, "x"),
                        ScoreRecord("a", 2020, 0.4, "x")])
    assert rows[0].year_means == {2019: pytest.approx(0.2), 2020: 0.4}
    assert rows[0].total_mean == pytest.approx(0.3)


def test_leaderboard_weights_years_not_regions():
    # 3 regions in one year, 1 in the other: years count equally
    scores = [ScoreRecord(f"r{i}", 2019, 0.0, "x") for i in range(3)] + [ScoreRecord("r0", 2020, 1.0, "x")]
    assert leaderboard(scores)[0].total_mean == 0.5


def test_leaderboard_sorted_and_duplicates():
    rows = leaderboard([ScoreRecord("r", 2019, 0.1, "low"), ScoreRecord("r", 2019, 0.9, "high")])
    assert [r.submission_name for r in rows] == ["high", "low"]
    with pytest.raises(DomainError):
        leaderboard([ScoreRecord("r", 2019, 0.1, "x"), ScoreRecord("r", 2019, 0.2, "x")])


def test_score_record_range():
    with pytest.raises(DomainError):
        ScoreRecord("r", 2019, 1.5, "x")


def test_scores_csv_round_trip(tmp_path):
    scores = [ScoreRecord("roxi_0004", 2019, 0.29649640000000005, "a"), ScoreRecord("roxi_0005", 2020, 0.1, "b")]
    path = write_scores_csv(tmp_path / "s.csv", scores)
    assert read_scores_csv(path) == scores
    bad = tmp_path / "bad.csv"
    bad.write_text("name,iou\nx,0.1\n")
    with pytest.raises(DomainError):
        read_scores_csv(bad)
