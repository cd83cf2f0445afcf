import math
from statistics import NormalDist

import numpy as np
import pytest
from hypothesis import given, strategies as st

from precip_uq.scoring import (
    DEFAULT_LEVELS, SCORING_RULE, DegenerateBenchmark, LevelGrid, QuantilePredictions, coverage,
    mean_quantile_score, mean_scoring_rule, per_station_skill, pinball, quantile_scoring_rule,
    score_table, skill,
)

finite = st.floats(-1e6, 1e6, allow_nan=False)
levels = st.floats(0.001, 0.999)


def test_pinball_values():
    assert pinball(3, 1, 0.5) == 1.0
    assert pinball(0, 10, 0.9) == 9.0
    assert pinball(4.2, 4.2, 0.3) == 0.0


@pytest.mark.parametrize("alpha", [0.0, 1.0, -0.1, 1.5])
def test_pinball_rejects_levels_outside_unit_interval(alpha):
    with pytest.raises(ValueError):
        pinball(1, 2, alpha)


def test_mean_quantile_score_values():
    assert mean_quantile_score([1, 2, 3], [1, 2, 3], 0.7) == 0.0
    assert mean_quantile_score([0, 0], [10, 10], 0.9) == 9.0
    assert mean_quantile_score([1, 3], [2, 2], 0.25) == 0.5
    with pytest.raises(ValueError):
        mean_quantile_score([], [], 0.5)
    with pytest.raises(ValueError):
        mean_quantile_score([1, 2], [1], 0.5)


def test_skill_values():
    assert skill(1.3, 1.3) == 0.0
    assert skill(0.8, 1.0) == pytest.approx(0.2, abs=1e-15)
    with pytest.raises(DegenerateBenchmark, match="degenerate benchmark"):
        skill(0.5, 0.0)


def test_quantile_scoring_rule_values():
    assert quantile_scoring_rule([1, 3], 2, (0.25, 0.75)) == 0.5
    assert quantile_scoring_rule([2, 2, 2], 2, (0.1, 0.5, 0.9)) == 0.0
    assert quantile_scoring_rule([7.0], 3.0, (0.3,)) == pinball(7.0, 3.0, 0.3)
    with pytest.raises(ValueError):
        quantile_scoring_rule([1, 2], 2, (0.1, 0.5, 0.9))


def test_coverage_values():
    assert coverage([1, 2, 3], [1, 2, 3]) == 1.0
    assert coverage([0, 3, 3, 10], [1, 2, 3, 4]) == 0.75
    assert coverage([0, 0], [1, 1]) == 0.0
    with pytest.raises(ValueError):
        coverage([], [])


@given(finite, finite)
def test_median_score_is_half_absolute_error(z, y):
    assert pinball(z, y, 0.5) == abs(z - y) / 2


@given(finite, finite, levels)
def test_pinball_nonnegative_and_zero_only_at_equality(z, y, alpha):
    v = pinball(z, y, alpha)
    assert v >= 0
    assert (v == 0) == (z == y)


@given(st.lists(finite, min_size=9, max_size=9), finite)
def test_scoring_rule_is_sum_of_level_scores(zs, y):
    total = sum(pinball(z, y, a) for z, a in zip(zs, DEFAULT_LEVELS))
    assert abs(quantile_scoring_rule(zs, y, LevelGrid()) - total) <= 1e-12 * max(1.0, abs(total))


@given(st.floats(0.01, 100), st.floats(0.01, 100), st.floats(0.01, 100))
def test_skill_is_zero_on_self_and_decreasing(a, b, ref):
    assert skill(a, a) == 0.0
    if a < b:
        assert skill(a, ref) > skill(b, ref)


def test_grid_argmin_recovers_normal_quantile():
    y = np.random.default_rng(2024).standard_normal(100_000)
    grid = np.round(np.arange(-300, 301) / 100, 2)
    ys = np.sort(y)
    # mean pinball at every grid point via prefix sums over the sorted draws
    k = np.searchsorted(ys, grid, side="right")  # count of y <= z
    csum = np.concatenate([[0.0], np.cumsum(ys)])
    below = k * grid - csum[k]
    above = (csum[-1] - csum[k]) - (ys.size - k) * grid
    loss = ((1 - 0.9) * below + 0.9 * above) / ys.size
    assert abs(grid[np.argmin(loss)] - NormalDist().inv_cdf(0.9)) < 0.05
    spot = [mean_quantile_score(np.full(y.size, z), y, 0.9) for z in (1.0, 1.28)]
    assert spot == pytest.approx([loss[np.searchsorted(grid, z)] for z in (1.0, 1.28)], rel=1e-9)


def test_per_station_skill_hand_case():
    y = np.array([0.0, 0.0, 0.0, 0.0])
    grid = LevelGrid((0.5,))
    bench = QuantilePredictions([[2.0], [2.0], [1.0], [1.0]], grid)
    learner = QuantilePredictions([[1.0], [1.0], [1.0], [1.0]], grid)
    out = per_station_skill({"qr": bench, "m": learner}, y, {"a": [0, 1], "b": [2, 3]}, "qr", 0.5)
    assert out[("m", "a")] == 0.5
    assert out[("m", "b")] == 0.0
    assert out[("qr", "a")] == 0.0 and out[("qr", "b")] == 0.0


def test_per_station_skill_single_sample_and_degenerate_station():
    grid = LevelGrid((0.3,))
    y = np.array([1.0, 5.0])
    bench = QuantilePredictions([[1.0], [3.0]], grid)
    learner = QuantilePredictions([[2.0], [4.0]], grid)
    out = per_station_skill({"qr": bench, "m": learner}, y, {"a": [0], "b": [1]}, "qr", 0.3)
    assert out[("m", "a")] is None  # benchmark scores zero at this station
    assert out[("m", "b")] == 1 - pinball(4.0, 5.0, 0.3) / pinball(3.0, 5.0, 0.3)


def test_score_table_internal_consistency(rng):
    n = 300
    y = rng.gamma(2.0, 10.0, n)
    grid = LevelGrid()
    base = np.sort(rng.gamma(2.0, 10.0, (n, len(grid))), axis=1)
    preds = {"qr": QuantilePredictions(base, grid),
             "m": QuantilePredictions(base * 0.9 + 1, grid), "dead": None}
    stations = {f"s{k}": list(range(k, n, 7)) for k in range(7)}
    t = score_table(preds, y, "qr", stations)
    assert t.scoring_rule_skill["qr"] == 0.0
    assert t.scoring_rule_skill["dead"] is None and t.coverage["dead"] == [None] * 9
    expected = 1 - t.mean_scoring_rule["m"] / t.mean_scoring_rule["qr"]
    assert abs(t.scoring_rule_skill["m"] - expected) <= 1e-12
    for j, a in enumerate(grid):
        assert t.mean_scores["m"][j] >= 0 and 0 <= t.coverage["m"][j] <= 1
        assert abs(t.level_skills["m"][j] - (1 - t.mean_scores["m"][j] / t.mean_scores["qr"][j])) <= 1e-12
    assert set(t.station_skills) == {repr(a) for a in grid} | {SCORING_RULE}
    assert set(t.station_skills[SCORING_RULE]["m"]) == set(stations)
    assert mean_scoring_rule(preds["m"], y) == pytest.approx(t.mean_scoring_rule["m"], rel=0, abs=0)
    again = type(t).from_dict(t.to_dict())
    assert again == t


def test_level_grid_validation():
    assert LevelGrid().levels == DEFAULT_LEVELS
    for bad in [(), (0.5, 0.5), (0.6, 0.4), (0.0, 0.5)]:
        with pytest.raises(ValueError):
            LevelGrid(bad)


def test_quantile_predictions_are_frozen_and_finite():
    p = QuantilePredictions(np.zeros((2, 9)))
    with pytest.raises(ValueError):
        p.values[0, 0] = 1.0
    with pytest.raises(ValueError):
        QuantilePredictions(np.full((1, 9), math.nan))
    with pytest.raises(ValueError):
        QuantilePredictions(np.zeros((2, 3)))
