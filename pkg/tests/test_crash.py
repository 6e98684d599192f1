"""Crash indicators, logit solver vs dense-likelihood oracle, clustered
covariance vs a hand computation, and the odds-ratio transform."""

import numpy as np
import pytest

from tailrisk.crash import (
    CrashConfig,
    attach_clustered_inference,
    cluster_robust_cov,
    crash_indicator,
    fit_logit,
    fit_regime_logits,
    odds_ratios,
    quintile_gap,
    threshold_sweep,
)
from tailrisk.errors import DegenerateOutcomeError

from oracles import hand_cluster_sandwich, logit_lattice_mle, logit_score


def _logit_instance(seed, p):
    """Random instance with n <= 50 and moderate true coefficients."""
    rng = np.random.default_rng(seed)
    n = int(rng.integers(40, 51))
    X = np.column_stack([np.ones(n), rng.normal(size=(n, p - 1))])
    beta_true = rng.uniform(-0.8, 0.8, size=p)
    prob = 1.0 / (1.0 + np.exp(-(X @ beta_true)))
    y = (rng.uniform(size=n) < prob).astype(float)
    if y.sum() in (0, n):
        return _logit_instance(seed + 1000, p)
    return y, X


# ---------------------------------------------------------------------------
# indicator
# ---------------------------------------------------------------------------

def test_crash_indicator_is_strict_and_keeps_missing():
    ret = np.array([-0.21, -0.20, -0.19, 0.05, np.nan])
    out = crash_indicator(ret, 0.20)
    np.testing.assert_array_equal(out[:4], [1.0, 0.0, 0.0, 0.0])
    assert np.isnan(out[4])


def test_crash_events_nest_across_thresholds():
    rng = np.random.default_rng(2)
    ret = rng.normal(-0.05, 0.15, size=500)
    c15 = crash_indicator(ret, 0.15)
    c20 = crash_indicator(ret, 0.20)
    c25 = crash_indicator(ret, 0.25)
    assert np.all(c20 <= c15)
    assert np.all(c25 <= c20)
    assert c15.sum() > c20.sum() > c25.sum() > 0


def test_crash_config_rejects_bad_threshold():
    with pytest.raises(ValueError, match="threshold"):
        CrashConfig(threshold=0.0)


# ---------------------------------------------------------------------------
# solver vs dense-likelihood oracle
# ---------------------------------------------------------------------------

def test_newton_matches_lattice_oracle_on_random_instances():
    checked = 0
    seed = 0
    while checked < 10:
        p = 2 if checked < 6 else 3
        y, X = _logit_instance(seed, p)
        seed += 1
        oracle, hit_boundary = logit_lattice_mle(y, X)
        if hit_boundary:
            continue
        fit = fit_logit(y, X, [f"b{j}" for j in range(p)])
        assert fit.converged
        assert np.max(np.abs(fit.coef - oracle)) < 2e-3
        assert np.max(np.abs(logit_score(y, X, fit.coef))) < 1e-8
        checked += 1


def test_score_tolerance_is_reported():
    y, X = _logit_instance(3, 2)
    fit = fit_logit(y, X, ["const", "x"])
    assert fit.score_max < 1e-8
    assert fit.score_max == pytest.approx(np.max(np.abs(logit_score(y, X, fit.coef))))


def test_degenerate_outcome_raises():
    y = np.zeros(30)
    X = np.column_stack([np.ones(30), np.linspace(-1, 1, 30)])
    with pytest.raises(DegenerateOutcomeError):
        fit_logit(y, X, ["const", "x"])


def test_separation_is_flagged_not_fatal():
    x = np.linspace(-2, 2, 40)
    y = (x > 0).astype(float)
    X = np.column_stack([np.ones(40), x])
    fit = fit_logit(y, X, ["const", "x"])
    assert fit.separated
    assert any("separation" in f for f in fit.flags)


def test_covariate_rescaling_scales_its_coefficient():
    y, X = _logit_instance(11, 3)
    fit = fit_logit(y, X, ["const", "x1", "x2"])
    Xs = X.copy()
    Xs[:, 1] = Xs[:, 1] / 10.0
    fit_s = fit_logit(y, Xs, ["const", "x1", "x2"])
    assert fit_s.coef[1] == pytest.approx(10.0 * fit.coef[1], abs=1e-8)
    assert fit_s.coef[2] == pytest.approx(fit.coef[2], abs=1e-8)


# ---------------------------------------------------------------------------
# clustered covariance
# ---------------------------------------------------------------------------

def test_three_cluster_sandwich_matches_hand_computation():
    rng = np.random.default_rng(17)
    n = 12
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.uniform(size=n) < 0.5).astype(float)
    labels = np.repeat([0, 1, 2], 4)
    fit = fit_logit(y, X, ["const", "x"], clusters=labels)
    hand = hand_cluster_sandwich(X, y, fit.coef, labels)
    np.testing.assert_allclose(fit.cov_clustered, hand, rtol=0, atol=1e-10)
    assert fit.n_clusters == 3
    assert fit.small_sample_factor == pytest.approx(1.5)


def test_singleton_clusters_reduce_to_row_sandwich():
    rng = np.random.default_rng(23)
    n = 40
    X = np.column_stack([np.ones(n), rng.normal(size=n)])
    y = (rng.uniform(size=n) < 0.4).astype(float)
    fit = fit_logit(y, X, ["const", "x"])
    cov = cluster_robust_cov(fit, np.arange(n))
    # row-level sandwich assembled directly
    prob = 1.0 / (1.0 + np.exp(-(X @ fit.coef)))
    S = X * (y - prob)[:, None]
    H = X.T @ (X * (prob * (1 - prob))[:, None])
    Hinv = np.linalg.inv(H)
    hc = Hinv @ (S.T @ S) @ Hinv
    np.testing.assert_allclose(cov, (n / (n - 1.0)) * hc, rtol=0, atol=1e-12)


def test_cluster_labels_must_align():
    y, X = _logit_instance(5, 2)
    fit = fit_logit(y, X, ["const", "x"])
    with pytest.raises(ValueError, match="align"):
        cluster_robust_cov(fit, np.arange(len(y) - 1))


def test_attach_inference_populates_z_and_p():
    y, X = _logit_instance(29, 2)
    labels = np.arange(len(y)) % 6
    fit = fit_logit(y, X, ["const", "x"])
    attach_clustered_inference(fit, labels)
    se = np.sqrt(np.diag(fit.cov_clustered))
    np.testing.assert_allclose(fit.z, fit.coef / se)
    assert np.all((fit.p_values >= 0) & (fit.p_values <= 1))


# ---------------------------------------------------------------------------
# odds ratios
# ---------------------------------------------------------------------------

def test_odds_ratio_power_identity_at_machine_precision():
    for beta in (-0.0844, 0.3, -1.7, 0.0021):
        ors = odds_ratios(beta, units=(1, 5))
        assert ors[5] == pytest.approx(ors[1] ** 5, rel=5e-15)


def test_reference_odds_ratio_pair():
    ors = odds_ratios(-0.0844, units=(1, 5))
    assert round(ors[1], 3) == 0.919
    assert round(ors[5], 3) == 0.656


def test_odds_ratio_sign_inversion():
    for beta in (0.4, 1.2):
        pos = odds_ratios(beta, units=(1, 5))
        neg = odds_ratios(-beta, units=(1, 5))
        for k in (1, 5):
            assert neg[k] == pytest.approx(1.0 / pos[k], rel=1e-14)


# ---------------------------------------------------------------------------
# regime cells and descriptives on a generated panel
# ---------------------------------------------------------------------------

def test_regime_logits_produce_four_cells(prepared_sim):
    panel, regime, _ = prepared_sim
    out = fit_regime_logits(panel, regime, CrashConfig())
    assert {(r["spec"], r["regime"]) for r in out["table"]} == {
        ("A", "stress"),
        ("A", "nonstress"),
        ("B", "stress"),
        ("B", "nonstress"),
    }
    for row in out["table"]:
        assert row["converged"]
        assert row["or_1"] == pytest.approx(np.exp(row["esg_coef"]), rel=1e-12)
        assert row["n_clusters"] > 1


def test_regime_logits_common_sample_mode(prepared_sim):
    panel, regime, _ = prepared_sim
    out = fit_regime_logits(panel, regime, CrashConfig(), sample_mode="common")
    by_cell = {(r["spec"], r["regime"]): r for r in out["table"]}
    for reg in ("stress", "nonstress"):
        assert by_cell[("A", reg)]["n_obs"] == by_cell[("B", reg)]["n_obs"]
    with pytest.raises(ValueError, match="sample_mode"):
        fit_regime_logits(panel, regime, CrashConfig(), sample_mode="bogus")


def test_quintile_gap_shape_and_determinism(prepared_sim):
    panel, regime, _ = prepared_sim
    a = quintile_gap(panel, regime, CrashConfig(), n_boot=100, seed=7)
    b = quintile_gap(panel, regime, CrashConfig(), n_boot=100, seed=7)
    assert a == b
    assert len(a["rates_stress"]) == 5
    assert a["gap_ci"][0] <= a["gap_ci"][1]
    assert a["gap_stress_pp"] == pytest.approx(a["rates_stress"][0] - a["rates_stress"][4])


def test_threshold_sweep_holds_classification_fixed(prepared_sim):
    panel, regime, _ = prepared_sim
    out = threshold_sweep(panel, regime, grid=(0.15, 0.20), n_boot=100, seed=3)
    assert out["grid"] == [0.15, 0.20]
    assert len(out["panel_a"]) == 2
    specs = {row["spec"] for row in out["panel_b"]}
    assert specs == {"B"}
    n_by_thr = {row["threshold"]: row["n_obs"] for row in out["panel_b"] if row["regime"] == "stress"}
    assert n_by_thr[0.15] == n_by_thr[0.20]
