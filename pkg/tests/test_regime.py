"""Market weighting and stress classification invariants.

The flag-count oracle is independent of the implementation: for level q and
T months the lower empirical quantile convention must flag exactly
ceil(q * T) months when market returns are all distinct.
"""

import math

import numpy as np
import pytest

from tailrisk.regime import (
    build_regime,
    classify_stress,
    firm_weight,
    market_return,
    market_weights,
    realized_vol,
    regime_summary,
)

from conftest import toy_panel


def _distinct_series(T, seed):
    rng = np.random.default_rng(seed)
    r = rng.normal(0.0, 0.04, size=T)
    assert len(np.unique(r)) == T
    months = [f"m{t:04d}" for t in range(T)]
    return months, r


# ---------------------------------------------------------------------------
# counting rule
# ---------------------------------------------------------------------------

@pytest.mark.parametrize("T", [100, 143, 500])
def test_flag_count_matches_ceiling_oracle(T):
    months, r = _distinct_series(T, seed=T)
    regime = classify_stress(months, r, level=0.15)
    expected = math.ceil(0.15 * T - 1e-9)
    assert regime.n_stress == expected
    if T == 143:
        assert regime.n_stress == 22


def test_flagged_months_are_the_smallest_returns():
    months, r = _distinct_series(200, seed=5)
    regime = classify_stress(months, r, level=0.15)
    k = regime.n_stress
    worst = set(np.argsort(r)[:k])
    assert set(np.where(regime.stress)[0]) == worst


def test_cutoff_recomputation_is_bitwise():
    months, r = _distinct_series(143, seed=9)
    regime = classify_stress(months, r, level=0.15)
    np.testing.assert_array_equal(regime.recompute_flags(), regime.stress)


def test_ties_at_cutoff_classify_as_stress():
    r = np.array([-0.10, -0.10, -0.10, 0.01, 0.02, 0.03, 0.04, 0.05, 0.06, 0.07] * 3)
    months = [f"m{t}" for t in range(len(r))]
    regime = classify_stress(months, r, level=0.15)
    # nominal k = ceil(0.15*30) = 5, but all nine -0.10 ties classify
    assert regime.n_stress == 9
    assert any("ties" in f for f in regime.flags)


def test_level_monotonicity_nested_stress_sets():
    months, r = _distinct_series(180, seed=11)
    lower = classify_stress(months, r, level=0.10)
    higher = classify_stress(months, r, level=0.20)
    set_lo = set(np.where(lower.stress)[0])
    set_hi = set(np.where(higher.stress)[0])
    assert set_lo <= set_hi


def test_stress_share_tracks_level():
    months, r = _distinct_series(200, seed=13)
    regime = classify_stress(months, r, level=0.15)
    assert abs(regime.n_stress / 200 - 0.15) <= 1.0 / 200


def test_classify_rejects_short_series_and_bad_levels():
    months, r = _distinct_series(19, seed=1)
    with pytest.raises(ValueError, match="at least 20 months"):
        classify_stress(months, r)
    months, r = _distinct_series(50, seed=2)
    with pytest.raises(ValueError, match="quantile level"):
        classify_stress(months, r, level=0.6)


# ---------------------------------------------------------------------------
# weights and the market series
# ---------------------------------------------------------------------------

def test_firm_weight_formula_and_guards():
    assert firm_weight(8.0, 0.5) == pytest.approx(2.0 / 0.5)
    with pytest.raises(ValueError, match="sigma"):
        firm_weight(8.0, 0.0)
    with pytest.raises(ValueError, match="volume"):
        firm_weight(-1.0, 0.5)


def test_realized_vol_needs_five_observations():
    assert np.isnan(realized_vol([0.01, 0.02, 0.01]))
    assert np.isnan(realized_vol([0.01] * 8))  # flat series
    vals = [0.01, -0.02, 0.005, 0.013, -0.007, 0.002]
    assert realized_vol(vals) == pytest.approx(np.std(vals, ddof=1))


def test_weights_are_prior_month_and_normalized():
    panel = toy_panel(n_firms=35, n_months=24)
    w = market_weights(panel, min_eligible=10)
    merged = w.merge(
        panel.frame[["firm_id", "month", "volume_usd", "sigma"]],
        on=["firm_id", "month"],
        how="left",
        suffixes=("", "_now"),
    )
    row = merged.dropna(subset=["volume_usd", "raw_weight"]).iloc[10]
    prior = panel.frame[
        (panel.frame["firm_id"] == row["firm_id"]) & (panel.frame["month"] == row["month"] - 1)
    ].iloc[0]
    assert row["volume_usd"] == prior["volume_usd"]
    assert row["raw_weight"] == pytest.approx(np.cbrt(prior["volume_usd"]) / prior["sigma"])
    sums = w.dropna(subset=["normalized_weight"]).groupby("month")["normalized_weight"].sum()
    np.testing.assert_allclose(sums.to_numpy(), 1.0, rtol=0, atol=1e-12)


def test_market_return_excludes_thin_months():
    panel = toy_panel(n_firms=35, n_months=24)
    months, rm, excluded, flags = market_return(panel, min_eligible=10)
    # first month has no prior-month weights, so it cannot clear eligibility
    assert panel.frame["month"].min() in excluded
    assert len(months) == 23
    assert any("eligible" in f for f in flags)


def test_volume_scale_invariance_of_flags():
    panel = toy_panel(n_firms=35, n_months=30)
    base = build_regime(panel, min_eligible=10)
    frame = panel.frame.copy()
    frame["volume_usd"] = frame["volume_usd"] * 1000.0
    scaled = build_regime(panel.replace(frame=frame), min_eligible=10)
    np.testing.assert_array_equal(base.stress, scaled.stress)


def test_summary_fields_are_complete():
    panel = toy_panel(n_firms=35, n_months=30)
    regime = build_regime(panel, min_eligible=10)
    summary = regime_summary(regime)
    assert summary["n_stress"] == regime.n_stress
    assert summary["quantile_convention"] == "lower_empirical"
    assert len(summary["stress_months"]) == regime.n_stress
    assert sum(summary["histogram"]["counts"]) == summary["n_months"]
