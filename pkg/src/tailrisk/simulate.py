"""Synthetic panel generator and Monte Carlo harness.

The generator emits panels in the exact shape the loader produces, so every
estimator in the package can be exercised end to end: fundamentals are built
by inverting the control derivation (at = exp(size), dltt = at * lev, ...),
a burn-in first month supplies the one-month lags, and per-firm-month
volume and volatility columns feed the market-weighting step.

Structural model per firm i, month t (controls W iid standard normal):

    D_it  = treatment_scale * (confound * gamma'W_it + noise * u_it)
    r_it  = market_t + baseline_scale * b'W_{i,t-1}
            + theta_state(t) * D_{i,t-1}                       (mean mode)
            + jump_size * J_it                                 (tail mode)
            + stress_drift_per_esg * D_{i,t-1}/treatment_scale (tail mode,
                                                          stress months only)
            + shock_scale * e_it

where in tail mode J_it ~ Bernoulli(p_it) with
logit p_it = jump_base_state(t) + theta_state(t) * D_{i,t-1}/treatment_scale,
so the treatment moves crash probability, not the conditional mean. Any
discrete downside-jump mixture mechanically tilts moderate quantiles too:
raising the jump probability displaces bulk mass downward, so the 20th
percentile of returns drifts with D even though the bulk distribution is
untouched. stress_drift_per_esg exists to cancel that tilt: a small
risk-compensation premium (firms carrying more jump risk earn slightly more
in the bulk) calibrated so the conditional quantiles outside the jump region
are flat in D. The ground-truth record carries theta per state and the jump
parameters, enough to score any estimate without re-deriving the DGP.

Stress months are a fixed-count random subset matching the classification
rule ceil(share * T), and market means are separated by several sigma so the
pipeline's drawdown classifier recovers the intended regime.
"""

from __future__ import annotations

import time
from dataclasses import asdict, dataclass, field, fields

import numpy as np
import pandas as pd

from . import _kernels
from .crash import CrashConfig, fit_regime_logits
from .dml import DmlConfig, dml_cell, final_stage
from .errors import ConvergenceError, TailriskError
from .panel import (
    CONTROL_COLUMNS,
    PILLAR_COLUMNS,
    PanelDataset,
    compute_excess_returns,
    derive_controls,
    filter_by_missing_rate,
    lag_columns,
    standardize_controls,
)
from .quantile import QuantileSpec, quantile_table
from .regime import build_regime

SECTOR_LABELS = ("CNS", "FIN", "IND", "TEC", "UTL", "HLT", "ENE", "MAT")
SHOCK_DISTS = ("student_t5", "gaussian")

# loadings are fixed, not drawn: they are part of the DGP identity
GAMMA = np.array([0.6, -0.5, 0.4, -0.3, 0.2])
BASELINE_COEF = np.array([0.8, -0.6, 0.5, -0.4, 0.3])


@dataclass(frozen=True)
class DgpSpec:
    """Parameters of one synthetic data-generating process.

    n_months counts analysis months; one extra burn-in month is emitted so
    lagged columns exist from the first analysis month on. theta_* is the
    conditional-mean slope on D in mean mode and the crash-logit slope per
    treatment-scale unit of D in tail mode.
    """

    n_firms: int = 70
    n_months: int = 85
    stress_share: float = 0.15
    theta_stress: float = 0.5
    theta_nonstress: float = 0.5
    tail_mode: bool = False
    confound_strength: float = 0.5
    treatment_noise: float = 1.0
    treatment_scale: float = 0.02
    baseline_scale: float = 0.02
    shock_scale: float = 0.04
    shock_dist: str = "student_t5"
    month_vol_sd: float = 0.0
    market_mu_stress: float = -0.08
    market_mu_normal: float = 0.01
    market_sigma: float = 0.015
    jump_size: float = -0.35
    jump_base_stress: float = -3.7
    jump_base_nonstress: float = -6.0
    stress_drift_per_esg: float = 0.0
    n_sectors: int = 4

    def __post_init__(self):
        if not 0.0 < self.stress_share < 0.5:
            raise ValueError(f"stress_share must lie in (0, 0.5), got {self.stress_share}")
        if self.n_firms < 50:
            raise ValueError(f"n_firms must be >= 50, got {self.n_firms}")
        if self.n_months < 60:
            raise ValueError(f"n_months must be >= 60, got {self.n_months}")
        if self.shock_dist not in SHOCK_DISTS:
            raise ValueError(f"shock_dist must be one of {SHOCK_DISTS}, got {self.shock_dist}")
        if not 1 <= self.n_sectors <= len(SECTOR_LABELS):
            raise ValueError(f"n_sectors must lie in [1, {len(SECTOR_LABELS)}]")
        if self.tail_mode and self.jump_size >= 0.0:
            raise ValueError("tail mode needs a negative jump_size")
        if self.month_vol_sd < 0.0:
            raise ValueError(f"month_vol_sd must be >= 0, got {self.month_vol_sd}")

    def replace(self, **kw) -> "DgpSpec":
        d = asdict(self)
        d.update(kw)
        return DgpSpec(**d)


@dataclass
class SimResult:
    """Monte Carlo summary for one (DGP, estimator) pair."""

    estimator: str
    n_replications: int
    n_failed: int
    target: float
    mean_estimate: float
    mean_bias: float
    rmse: float
    coverage: float
    rejection_rate: float
    wall_time_per_rep: float
    failures: list = field(default_factory=list)

    def to_dict(self, include_timing: bool = True) -> dict:
        d = {
            "schema_version": 1,
            "estimator": self.estimator,
            "n_replications": self.n_replications,
            "n_failed": self.n_failed,
            "target": self.target,
            "mean_estimate": self.mean_estimate,
            "mean_bias": self.mean_bias,
            "rmse": self.rmse,
            "coverage": self.coverage,
            "rejection_rate": self.rejection_rate,
            "failures": list(self.failures),
        }
        if include_timing:
            d["wall_time_per_rep"] = self.wall_time_per_rep
        return d


def _standardized_shocks(rng, size, dist: str):
    if dist == "gaussian":
        return rng.standard_normal(size)
    # student t5 scaled to unit variance; var(t_nu) = nu/(nu-2)
    return rng.standard_t(5, size) / np.sqrt(5.0 / 3.0)


def intended_stress_count(spec: DgpSpec) -> int:
    """ceil(share * T) with the same epsilon guard the classifier uses."""
    import math

    return int(math.ceil(spec.stress_share * spec.n_months - 1e-9))


def generate_panel(spec: DgpSpec, seed: int):
    """Deterministic (panel, ground_truth) for the given spec and seed.

    The emitted frame starts with one burn-in month; analysis months follow.
    Time slot 0 is internal only (it feeds the burn-in month's lags).
    """
    rng = np.random.default_rng([int(seed) & ((1 << 64) - 1), 0xD67])
    F, M = spec.n_firms, spec.n_months
    Tn = M + 2  # slot 0 internal, slot 1 burn-in month, slots 2..M+1 analysis

    # regime path: analysis slots get an exact-count random stress subset
    state = np.zeros(Tn, dtype=bool)
    k = intended_stress_count(spec)
    stress_slots = 2 + rng.permutation(M)[:k]
    state[stress_slots] = True

    W = rng.standard_normal((F, Tn, 5))
    u = rng.standard_normal((F, Tn))
    d_raw = spec.confound_strength * (W @ GAMMA) + spec.treatment_noise * u
    esg = spec.treatment_scale * d_raw
    pillars = {
        name: esg + 0.5 * spec.treatment_scale * rng.standard_normal((F, Tn))
        for name in PILLAR_COLUMNS
    }

    mu = np.where(state, spec.market_mu_stress, spec.market_mu_normal)
    market = mu + spec.market_sigma * rng.standard_normal(Tn)
    shocks = _standardized_shocks(rng, (F, Tn), spec.shock_dist)
    if spec.month_vol_sd > 0.0:
        # mean-one lognormal month multiplier; drawn after the firm shocks so
        # month_vol_sd=0 leaves the rest of the stream untouched
        mvol = np.exp(
            spec.month_vol_sd * rng.standard_normal(Tn)
            - 0.5 * spec.month_vol_sd**2
        )
        shocks = shocks * mvol[np.newaxis, :]

    theta = np.where(state, spec.theta_stress, spec.theta_nonstress)
    ret = np.full((F, Tn), np.nan)
    lag_esg = esg[:, :-1]
    lag_w = W[:, :-1, :]
    baseline = spec.baseline_scale * (lag_w @ BASELINE_COEF)
    ret[:, 1:] = market[1:] + baseline + spec.shock_scale * shocks[:, 1:]
    if spec.tail_mode:
        base = np.where(state, spec.jump_base_stress, spec.jump_base_nonstress)
        logit = base[1:] + theta[1:] * (lag_esg / spec.treatment_scale)
        p_jump = 1.0 / (1.0 + np.exp(-logit))
        jumps = rng.random((F, M + 1)) < p_jump
        ret[:, 1:] += spec.jump_size * jumps
        if spec.stress_drift_per_esg != 0.0:
            # compensation premium for jump exposure; cancels the mixture
            # tilt so quantiles above the jump region stay flat in D
            drift = spec.stress_drift_per_esg * (lag_esg / spec.treatment_scale)
            ret[:, 1:] += np.where(state[1:], drift, 0.0)
    else:
        ret[:, 1:] += theta[1:] * lag_esg

    vol_base = np.exp(rng.normal(16.0, 1.0, F))
    volume = vol_base[:, None] * np.exp(0.2 * rng.standard_normal((F, Tn)))
    sig_base = np.exp(rng.normal(np.log(0.08), 0.25, F))
    sigma = sig_base[:, None] * np.exp(0.2 * rng.standard_normal((F, Tn)))

    months = pd.period_range("2000-01", periods=M + 1, freq="M")
    sectors = np.array([SECTOR_LABELS[i % spec.n_sectors] for i in range(F)])
    emit = slice(1, Tn)
    at = np.exp(W[:, :, 0])

    def flat(a):
        return a[:, emit].reshape(-1)

    frame = pd.DataFrame(
        {
            "firm_id": np.repeat([f"F{i:04d}" for i in range(F)], M + 1),
            "month": np.tile(months, F),
            "ret": flat(ret),
            "volume_usd": flat(volume),
            "esg": flat(esg),
            "e_score": flat(pillars["e_score"]),
            "s_score": flat(pillars["s_score"]),
            "g_score": flat(pillars["g_score"]),
            "sector": np.repeat(sectors, M + 1),
            "at": flat(at),
            "dltt": flat(at * W[:, :, 1]),
            "ib": flat(at * W[:, :, 2]),
            "capx": flat(at * W[:, :, 3]),
            "ppent": flat(at * W[:, :, 4]),
            "sigma": flat(sigma),
        }
    )
    schema = {c: "synthetic" for c in frame.columns if c not in ("firm_id", "month")}
    panel = PanelDataset(frame=frame, schema=schema, flags=["synthetic"], transforms={})

    truth = {
        "schema_version": 1,
        "tail_mode": spec.tail_mode,
        "theta_stress": spec.theta_stress,
        "theta_nonstress": spec.theta_nonstress,
        "treatment_scale": spec.treatment_scale,
        "stress_months": sorted(str(months[s - 1]) for s in stress_slots),
        "confound": {
            "strength": spec.confound_strength,
            "gamma": GAMMA.tolist(),
            "baseline_coef": BASELINE_COEF.tolist(),
            "naive_ols_bias": naive_bias(spec),
        },
        "seed": int(seed),
    }
    if spec.tail_mode:
        truth["jump"] = {
            "size": spec.jump_size,
            "base_stress": spec.jump_base_stress,
            "base_nonstress": spec.jump_base_nonstress,
            "sensitivity_stress": spec.theta_stress,
            "sensitivity_nonstress": spec.theta_nonstress,
            "stress_drift_per_esg": spec.stress_drift_per_esg,
        }
    return panel, truth


def naive_bias(spec: DgpSpec) -> float:
    """Population omitted-variable bias of no-control OLS in mean mode.

    cov(D, baseline) / var(D) with D = ts*(c*gamma'W + tn*u) and
    baseline = bs*b'W; zero in tail mode (the mean channel is off).
    """
    if spec.tail_mode:
        return 0.0
    c, tn = spec.confound_strength, spec.treatment_noise
    num = spec.baseline_scale * c * float(GAMMA @ BASELINE_COEF)
    den = spec.treatment_scale * (c * c * float(GAMMA @ GAMMA) + tn * tn)
    return num / den


def panel_to_csv(panel: PanelDataset, path) -> None:
    """Write a panel in the loader's monthly CSV schema."""
    out = panel.frame.copy()
    out.insert(1, "date", out.pop("month").astype(str))
    out.to_csv(path, index=False)


def prepare_pipeline(panel: PanelDataset, *, level: float = 0.15, lag_pillars: bool = True):
    """Controls -> missing filter -> standardize -> lag -> regime -> excess."""
    panel = derive_controls(panel)
    panel, _ = filter_by_missing_rate(panel)
    panel = standardize_controls(panel)
    cols = ["esg", *CONTROL_COLUMNS]
    if lag_pillars:
        cols += [c for c in PILLAR_COLUMNS if c in panel.frame.columns]
    panel = lag_columns(panel, cols, lag=1)
    regime = build_regime(panel, level=level)
    # lags are materialized, so rows outside the market series (burn-in,
    # under-populated months) can go; excess returns need a market return
    keep = panel.frame["month"].isin(set(regime.months)).to_numpy()
    panel = panel.replace(frame=panel.frame[keep].reset_index(drop=True))
    panel = compute_excess_returns(panel, regime)
    return panel, regime


# ---------------------------------------------------------------------------
# estimators the Monte Carlo harness knows how to run
# ---------------------------------------------------------------------------

def _ols_cell(panel, regime, *, regime_name: str, seed: int) -> dict:
    """No-control OLS of excess return on lagged treatment in one regime."""
    from .dml import _dml_frame_arrays

    cfg = DmlConfig(outcome="excess_return", regime=regime_name, seed=seed)
    y, d, _, _, codes, _ = _dml_frame_arrays(panel, regime, cfg)
    dc = d - d.mean()
    yc = y - y.mean()
    est = final_stage(yc, dc, codes)
    return {"estimate": est.beta, "se": est.se, "z": est.z, "p": est.p, "n_obs": est.n_obs}


def run_estimator(panel: PanelDataset, truth: dict, estimator: dict, seed: int) -> dict:
    """Dispatch one estimator descriptor against one generated panel."""
    kind = estimator["kind"]
    level = estimator.get("stress_level", 0.15)
    panel, regime = prepare_pipeline(panel, level=level, lag_pillars=False)
    regime_name = estimator.get("regime", "nonstress")
    target = truth["theta_stress"] if regime_name == "stress" else truth["theta_nonstress"]
    if kind == "dml":
        cfg = DmlConfig(
            outcome=estimator.get("outcome", "excess_return"),
            treatment=estimator.get("treatment", "esg_agg"),
            learner=estimator.get("learner", "lasso"),
            regime=regime_name,
            n_folds=estimator.get("n_folds", 5),
            cv_folds=estimator.get("cv_folds", 5),
            seed=seed,
            learner_params=estimator.get("learner_params"),
        )
        est = dml_cell(panel, regime, cfg)
        out = {"estimate": est.beta, "se": est.se, "z": est.z, "p": est.p, "n_obs": est.n_obs}
    elif kind == "naive_ols":
        out = _ols_cell(panel, regime, regime_name=regime_name, seed=seed)
    else:
        raise ValueError(f"unknown estimator kind {kind!r}")
    out["target"] = target
    out["ci_lo"] = out["estimate"] - 1.959963984540054 * out["se"]
    out["ci_hi"] = out["estimate"] + 1.959963984540054 * out["se"]
    return out


def _one_replication(spec: DgpSpec, estimator: dict, rep_index: int, seed: int):
    """One (generate, estimate) draw; exceptions come back as strings."""
    rep_seed = _kernels.derive_key(int(seed) & ((1 << 64) - 1), rep_index + 1)
    try:
        panel, truth = generate_panel(spec, seed=rep_seed)
        return run_estimator(panel, truth, estimator, seed=_kernels.derive_key(rep_seed, 7))
    except (TailriskError, ValueError, KeyError, np.linalg.LinAlgError) as exc:
        return f"rep {rep_index}: {type(exc).__name__}: {exc}"


def monte_carlo(
    spec: DgpSpec, estimator: dict, n_replications: int, seed: int = 0, n_jobs: int = 1
) -> SimResult:
    """Replicate (generate, estimate) and summarize bias/coverage/size.

    Failed replications are excluded from the averages but counted; a
    failure rate above 5% raises. n_replications below 100 is rejected so
    coverage claims keep minimal resolution. Replication seeds derive from
    the replicate index alone, so any n_jobs gives identical results.
    """
    if n_replications < 100:
        raise ValueError(f"n_replications must be >= 100, got {n_replications}")
    t0 = time.perf_counter()
    if n_jobs == 1:
        results = [_one_replication(spec, estimator, r, seed) for r in range(n_replications)]
    else:
        from joblib import Parallel, delayed

        results = Parallel(n_jobs=n_jobs)(
            delayed(_one_replication)(spec, estimator, r, seed) for r in range(n_replications)
        )
    estimates, ses, covers, rejects = [], [], [], []
    failures = []
    target = np.nan
    for res in results:
        if isinstance(res, str):
            failures.append(res)
            continue
        target = res["target"]
        estimates.append(res["estimate"])
        ses.append(res["se"])
        covers.append(res["ci_lo"] <= res["target"] <= res["ci_hi"])
        rejects.append(res["p"] < 0.05)
    wall = (time.perf_counter() - t0) / n_replications
    n_failed = len(failures)
    if n_failed > 0.05 * n_replications:
        raise ConvergenceError(
            f"{n_failed}/{n_replications} replications failed (> 5%): {failures[:3]}"
        )
    est = np.array(estimates)
    return SimResult(
        estimator=estimator.get("name", estimator["kind"]),
        n_replications=n_replications,
        n_failed=n_failed,
        target=float(target),
        mean_estimate=float(est.mean()),
        mean_bias=float(est.mean() - target),
        rmse=float(np.sqrt(np.mean((est - target) ** 2))),
        coverage=float(np.mean(covers)),
        rejection_rate=float(np.mean(rejects)),
        wall_time_per_rep=wall,
        failures=failures,
    )


# ---------------------------------------------------------------------------
# state-dependence study: the full pipeline on tail-mode panels
# ---------------------------------------------------------------------------

def _panel_patterns(panel, regime, *, seed: int, n_boot: int, taus, n_folds: int) -> dict:
    """Qualitative signature of one tail-mode panel.

    crash-logit: stress slope negative with p < 0.05, non-stress 95% CI
    covering zero. quantile: stress-state slope CI excluding zero at the two
    deepest taus, covering zero at the shallowest. dml (crash outcome,
    lasso): stress cell p < 0.05, non-stress p >= 0.05.
    """
    rec = {}

    logits = fit_regime_logits(panel, regime, CrashConfig())
    by_cell = {(r["spec"], r["regime"]): r for r in logits["table"]}
    st = by_cell[("B", "stress")]
    ns = by_cell[("B", "nonstress")]
    rec["logit_stress_coef"] = st.get("esg_coef")
    rec["logit_stress_p"] = st.get("esg_p")
    ns_se = abs(ns["esg_coef"] / ns["esg_z"]) if ns.get("esg_z") else np.nan
    ns_lo = ns["esg_coef"] - 1.959963984540054 * ns_se
    ns_hi = ns["esg_coef"] + 1.959963984540054 * ns_se
    rec["logit_pattern"] = bool(
        st.get("esg_coef", np.nan) < 0.0
        and st.get("esg_p", 1.0) < 0.05
        and ns_lo <= 0.0 <= ns_hi
    )

    qspec = QuantileSpec(tau_grid=tuple(taus), n_boot=n_boot, seed=seed)
    qt = quantile_table(panel, regime, qspec)
    slope = {round(r["tau"], 6): r for r in qt["rows"]}
    deep = [slope[round(t, 6)] for t in (taus[0], taus[1])]
    shallow = slope[round(taus[-1], 6)]
    rec["quantile_ci"] = {
        str(t): (slope[round(t, 6)]["esg_stress_slope_lo"], slope[round(t, 6)]["esg_stress_slope_hi"])
        for t in taus
    }
    rec["quantile_pattern"] = bool(
        all(r["esg_stress_slope_lo"] > 0.0 or r["esg_stress_slope_hi"] < 0.0 for r in deep)
        and shallow["esg_stress_slope_lo"] <= 0.0 <= shallow["esg_stress_slope_hi"]
    )

    dml_ps = {}
    for reg in ("stress", "nonstress"):
        cfg = DmlConfig(outcome="crash_020", learner="lasso", regime=reg, n_folds=n_folds, seed=seed)
        est = dml_cell(panel, regime, cfg)
        dml_ps[reg] = est.p
        rec[f"dml_{reg}_beta"] = est.beta
        rec[f"dml_{reg}_p"] = est.p
    rec["dml_pattern"] = bool(dml_ps["stress"] < 0.05 and dml_ps["nonstress"] >= 0.05)
    return rec


def state_dependence_study(
    spec: DgpSpec,
    n_panels: int = 50,
    seed: int = 0,
    *,
    n_boot: int = 200,
    taus=(0.01, 0.02, 0.20),
    n_folds: int = 5,
) -> dict:
    """Frequency of the three qualitative patterns across simulated panels."""
    if n_panels < 10:
        raise ValueError(f"n_panels must be >= 10, got {n_panels}")
    if not spec.tail_mode:
        raise ValueError("state_dependence_study needs a tail_mode spec")
    records, failures = [], []
    t0 = time.perf_counter()
    for r in range(n_panels):
        rep_seed = _kernels.derive_key(int(seed) & ((1 << 64) - 1), r + 1)
        try:
            panel, truth = generate_panel(spec, seed=rep_seed)
            panel, regime = prepare_pipeline(panel, level=spec.stress_share, lag_pillars=False)
            rec = _panel_patterns(
                panel, regime, seed=_kernels.derive_key(rep_seed, 7),
                n_boot=n_boot, taus=taus, n_folds=n_folds,
            )
            rec["panel"] = r
            records.append(rec)
        except (TailriskError, ValueError, KeyError) as exc:
            failures.append(f"panel {r}: {type(exc).__name__}: {exc}")
    if len(failures) > 0.05 * n_panels:
        raise ConvergenceError(f"{len(failures)}/{n_panels} panels failed (> 5%): {failures[:3]}")
    n_ok = len(records)
    freq = {
        key: float(np.mean([rec[f"{key}_pattern"] for rec in records])) if n_ok else np.nan
        for key in ("logit", "quantile", "dml")
    }
    return {
        "schema_version": 1,
        "n_panels": n_panels,
        "n_failed": len(failures),
        "frequencies": freq,
        "records": records,
        "failures": failures,
        "wall_time_per_panel": (time.perf_counter() - t0) / n_panels,
    }


def spec_from_dict(d: dict) -> DgpSpec:
    """Build a DgpSpec from a plain dict, rejecting unknown keys."""
    valid = {f.name for f in fields(DgpSpec)}
    unknown = sorted(set(d) - valid)
    if unknown:
        raise ValueError(f"unknown DGP parameters {unknown}; valid: {sorted(valid)}")
    return DgpSpec(**d)
