"""Synthetic panel generator: determinism, regime counts, ground truth."""

import numpy as np
import pandas as pd
import pytest

from tailrisk.panel import load_panel_csv
from tailrisk.simulate import (
    BASELINE_COEF,
    GAMMA,
    DgpSpec,
    generate_panel,
    intended_stress_count,
    monte_carlo,
    naive_bias,
    panel_to_csv,
    prepare_pipeline,
    spec_from_dict,
    state_dependence_study,
)


def test_generate_panel_is_a_pure_function_of_spec_and_seed():
    spec = DgpSpec(n_firms=50, n_months=60)
    a, truth_a = generate_panel(spec, seed=5)
    b, truth_b = generate_panel(spec, seed=5)
    pd.testing.assert_frame_equal(a.frame, b.frame)
    assert truth_a == truth_b
    c, _ = generate_panel(spec, seed=6)
    assert not c.frame["ret"].equals(a.frame["ret"])


def test_panel_shape_and_loader_schema():
    spec = DgpSpec(n_firms=50, n_months=60, n_sectors=3)
    panel, _ = generate_panel(spec, seed=1)
    frame = panel.frame
    # one burn-in month plus the analysis months, for every firm
    assert len(frame) == 50 * 61
    assert frame["firm_id"].nunique() == 50
    assert frame["sector"].nunique() == 3
    for col in ("ret", "volume_usd", "esg", "sector", "at", "dltt", "ib",
                "capx", "ppent", "sigma", "e_score", "s_score", "g_score"):
        assert col in frame.columns
    assert frame["ret"].notna().all()
    assert (frame["volume_usd"] > 0).all()


def test_intended_stress_count_ceiling_with_epsilon_guard():
    assert intended_stress_count(DgpSpec(n_months=85)) == 13
    assert intended_stress_count(DgpSpec(n_months=60)) == 9
    assert intended_stress_count(DgpSpec(n_months=100)) == 15
    # exact integer product must not be bumped up by float noise
    assert intended_stress_count(DgpSpec(n_months=140)) == 21


def test_classifier_recovers_the_intended_stress_months(small_sim_panel):
    panel, truth = small_sim_panel
    spec = DgpSpec(n_firms=50, n_months=60, theta_stress=-0.5, theta_nonstress=0.0)
    prepped, regime = prepare_pipeline(panel)
    flagged = {str(m) for m, s in zip(regime.months, regime.stress) if s}
    assert len(flagged) == intended_stress_count(spec)
    # the stress/normal market gap is ~6 sigma, so the volume/vol-weighted
    # classification finds exactly the intended months
    assert flagged == set(truth["stress_months"])


def test_ground_truth_carries_what_validation_needs():
    spec = DgpSpec(n_firms=50, n_months=60, tail_mode=True, theta_stress=-0.8,
                   theta_nonstress=0.0)
    _, truth = generate_panel(spec, seed=9)
    assert truth["theta_stress"] == -0.8
    assert truth["tail_mode"] is True
    assert len(truth["stress_months"]) == intended_stress_count(spec)
    assert truth["seed"] == 9
    assert truth["jump"]["base_stress"] == spec.jump_base_stress
    assert truth["confound"]["naive_ols_bias"] == naive_bias(spec)


def test_dgp_spec_validation():
    with pytest.raises(ValueError, match="stress_share"):
        DgpSpec(stress_share=0.5)
    with pytest.raises(ValueError, match="stress_share"):
        DgpSpec(stress_share=0.0)
    with pytest.raises(ValueError, match="n_firms"):
        DgpSpec(n_firms=49)
    with pytest.raises(ValueError, match="n_months"):
        DgpSpec(n_months=59)
    with pytest.raises(ValueError, match="shock_dist"):
        DgpSpec(shock_dist="cauchy")
    with pytest.raises(ValueError, match="n_sectors"):
        DgpSpec(n_sectors=0)
    with pytest.raises(ValueError, match="jump_size"):
        DgpSpec(tail_mode=True, jump_size=0.1)
    with pytest.raises(ValueError, match="month_vol_sd"):
        DgpSpec(month_vol_sd=-0.1)


def test_spec_replace_returns_new_frozen_spec():
    spec = DgpSpec()
    other = spec.replace(n_firms=55)
    assert other.n_firms == 55 and spec.n_firms == 70
    with pytest.raises(Exception):
        spec.n_firms = 60


def test_spec_from_dict_rejects_unknown_keys():
    assert spec_from_dict({"n_firms": 50, "n_months": 60}).n_firms == 50
    with pytest.raises(ValueError, match="theta"):
        spec_from_dict({"theta": 0.3})


def test_month_vol_only_perturbs_the_return_noise():
    base = DgpSpec(n_firms=50, n_months=60)
    a, _ = generate_panel(base, seed=3)
    b, _ = generate_panel(base.replace(month_vol_sd=0.4), seed=3)
    # treatment, fundamentals, and the regime path are drawn before the
    # month multiplier, so only returns (and later stream draws) may move
    for col in ("esg", "at", "dltt", "ib", "capx", "ppent"):
        pd.testing.assert_series_equal(a.frame[col], b.frame[col])
    assert not a.frame["ret"].equals(b.frame["ret"])


def test_stress_drift_shifts_only_stress_month_returns():
    base = DgpSpec(n_firms=50, n_months=60, tail_mode=True,
                   theta_stress=-0.5, theta_nonstress=0.0)
    a, truth = generate_panel(base, seed=310)
    b, truth_b = generate_panel(base.replace(stress_drift_per_esg=-0.002), seed=310)
    # the drift consumes no randomness, so everything but ret is untouched
    for col in ("esg", "at", "volume_usd", "sigma"):
        pd.testing.assert_series_equal(a.frame[col], b.frame[col])
    assert truth_b["jump"]["stress_drift_per_esg"] == -0.002

    fa, fb = a.frame, b.frame
    delta = fb["ret"] - fa["ret"]
    lag_z = fa.groupby("firm_id", sort=False)["esg"].shift(1) / base.treatment_scale
    month = fa["month"].astype(str)
    in_stress = month.isin(truth["stress_months"])
    ok = lag_z.notna()
    expected = np.where(in_stress[ok], -0.002 * lag_z[ok], 0.0)
    np.testing.assert_allclose(delta[ok].to_numpy(), expected, rtol=0, atol=1e-15)


def test_naive_bias_matches_hand_formula_and_tail_mode_zero():
    spec = DgpSpec(confound_strength=0.5, treatment_noise=1.0,
                   treatment_scale=0.02, baseline_scale=0.02)
    num = 0.02 * 0.5 * float(GAMMA @ BASELINE_COEF)
    den = 0.02 * (0.25 * float(GAMMA @ GAMMA) + 1.0)
    assert naive_bias(spec) == pytest.approx(num / den, rel=1e-12)
    assert naive_bias(spec.replace(tail_mode=True, jump_size=-0.3)) == 0.0


def test_panel_csv_roundtrip_through_loader(tmp_path):
    spec = DgpSpec(n_firms=50, n_months=60)
    panel, _ = generate_panel(spec, seed=11)
    path = tmp_path / "sim.csv"
    panel_to_csv(panel, path)
    loaded = load_panel_csv(path)
    assert len(loaded.frame) == len(panel.frame)
    np.testing.assert_allclose(
        loaded.frame["ret"].to_numpy(), panel.frame["ret"].to_numpy(), atol=1e-12
    )
    assert list(loaded.frame["firm_id"]) == list(panel.frame["firm_id"])


def test_monte_carlo_rejects_small_replication_counts():
    spec = DgpSpec(n_firms=50, n_months=60)
    with pytest.raises(ValueError, match="n_replications"):
        monte_carlo(spec, {"kind": "dml"}, n_replications=99, seed=0)


def test_state_dependence_study_guards():
    tail = DgpSpec(n_firms=50, n_months=60, tail_mode=True)
    with pytest.raises(ValueError, match="n_panels"):
        state_dependence_study(tail, n_panels=5, seed=0)
    with pytest.raises(ValueError, match="tail_mode"):
        state_dependence_study(DgpSpec(n_firms=50, n_months=60), n_panels=10, seed=0)
