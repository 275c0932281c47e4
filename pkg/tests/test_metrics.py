import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from eicoal.metrics import (
    MetricsUsageError,
    TruthGrid,
    abs_deviation,
    envelope,
    mciw,
    metrics_row,
    posterior_summary,
    summarize_rows,
    table_to_csv,
)
from oracles import quantile_by_sort

GRID = np.arange(0.0, 5.0, 0.5)


def test_truth_at_median_is_covered():
    rng = np.random.default_rng(0)
    draws = rng.normal(size=(401, len(GRID)))
    med = np.median(draws, axis=0)
    truth = TruthGrid(GRID, med)
    assert envelope(draws, truth, grid=GRID) == 1.0
    assert abs_deviation(draws, truth, grid=GRID) == pytest.approx(0.0, abs=1e-12)


def test_truth_above_upper_quantile_is_missed():
    draws = np.random.default_rng(1).uniform(size=(200, len(GRID)))
    assert envelope(draws, TruthGrid(GRID, np.full(len(GRID), 2.0)), grid=GRID) == 0.0


def test_constant_offset_and_degenerate_width():
    draws = np.tile(np.linspace(1.0, 2.0, len(GRID)), (50, 1))
    truth = TruthGrid(GRID, draws[0] + 0.3)
    assert abs_deviation(draws, truth, grid=GRID) == pytest.approx(0.3)
    assert mciw(draws, truth, grid=GRID) == 0.0


def test_uniform_draws_width():
    draws = np.random.default_rng(2).uniform(size=(20000, len(GRID)))
    w = mciw(draws, TruthGrid(GRID, np.full(len(GRID), 0.5)), grid=GRID)
    assert abs(w - 0.95) < 0.01


def test_carry_forward_alignment():
    draws = np.array([[1.0, 2.0, 3.0]])
    truth = TruthGrid(np.array([0.0, 0.25, 0.5, 0.75, 1.2]), np.array([1.0, 1.0, 2.0, 2.0, 3.0]))
    assert abs_deviation(draws, truth, grid=np.array([0.0, 0.5, 1.0])) == 0.0
    with pytest.raises(MetricsUsageError):
        envelope(draws, TruthGrid(np.array([-1.0, 0.0]), np.array([1.0, 1.0])), grid=np.array([0.0, 0.5, 1.0]))


def test_usage_errors():
    with pytest.raises(MetricsUsageError):
        TruthGrid(np.array([1.0, 0.5]), np.array([1.0, 1.0]))
    with pytest.raises(MetricsUsageError):
        envelope(np.zeros((0, 2)), TruthGrid(np.array([0.0, 1.0]), np.zeros(2)), grid=np.array([0.0, 1.0]))
    with pytest.raises(MetricsUsageError):
        summarize_rows([])


def test_summary_matches_sort_oracle():
    rng = np.random.default_rng(3)
    draws = rng.gamma(2.0, size=(137, len(GRID)))
    table = posterior_summary(draws, GRID, grid=GRID)
    for j in range(len(GRID)):
        assert table["median"][j] == quantile_by_sort(draws[:, j], 0.5)
        assert table["lower_95"][j] == quantile_by_sort(draws[:, j], 0.025)
        assert table["upper_80"][j] == quantile_by_sort(draws[:, j], 0.9)
        assert table["lower_50"][j] == quantile_by_sort(draws[:, j], 0.25)


def test_single_draw_summary():
    draws = np.arange(len(GRID), dtype=float)[None, :]
    table = posterior_summary(draws, GRID, grid=GRID)
    for key in ("median", "lower_95", "upper_95", "lower_50"):
        assert np.array_equal(table[key], draws[0])
    assert table_to_csv(table).splitlines()[0] == "time,median,lower_50,upper_50,lower_80,upper_80,lower_95,upper_95"


def test_truth_csv_round_trip():
    t = TruthGrid(GRID, np.linspace(2, 1, len(GRID)), E=np.ones(len(GRID)), I=np.ones(len(GRID)))
    back = TruthGrid.from_csv(t.to_csv())
    assert np.array_equal(back.R, t.R) and np.array_equal(back.E, t.E)


def test_summarize_rows():
    rows = [{"ENV": e, "AD": 0.1 * e, "MCIW": 1.0} for e in np.linspace(0.5, 1.0, 11)]
    out = summarize_rows(rows)
    assert out["n"] == 11 and out["ENV"] == pytest.approx(0.75) and out["MCIW_lower"] == 1.0


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32 - 1), st.integers(1, 60))
def test_metric_properties(seed, n):
    rng = np.random.default_rng(seed)
    draws = rng.normal(size=(n, len(GRID)))
    truth = TruthGrid(GRID, rng.normal(size=len(GRID)))
    row = metrics_row(draws, truth, grid=GRID)
    perm = draws[rng.permutation(n)]
    assert metrics_row(perm, truth, grid=GRID) == row
    assert 0.0 <= row["ENV"] <= 1.0 and row["AD"] >= 0 and row["MCIW"] >= 0
    widths = [mciw(draws, truth, level=lv, grid=GRID) for lv in (0.5, 0.8, 0.95, 1.0)]
    assert all(a <= b + 1e-12 for a, b in zip(widths, widths[1:]))
    inside = (draws.min(axis=0) <= truth.R) & (truth.R <= draws.max(axis=0))
    if inside.all():
        assert envelope(draws, truth, level=1.0, grid=GRID) == 1.0
