"""Partialling-out double machine learning with month-block cross-fitting.

Per regime cell: folds are assigned by month (every row of a month shares a
fold), nuisance functions m(W) = E[Y|W] and g(W) = E[D|W] are fit on each
fold's complement with hyperparameters chosen by cross-validation inside
that complement, and residuals Ytil = Y - m(W), Dtil = D - g(W) are strictly
out of fold. The final stage regresses Ytil on Dtil without intercept:
beta = sum(Dtil*Ytil) / sum(Dtil^2), with a month-clustered sandwich
standard error. The regime split happens before cross-fitting, so stress
and non-stress cells share nothing.

All randomness (folds, forest draws) derives from (seed, cell identity,
fold index), so threading cannot change results.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np
import scipy.stats

from . import _kernels
from .crash import crash_indicator
from .errors import DegenerateOutcomeError
from .learners import (
    FOREST_DEFAULTS,
    GBM_DEFAULTS,
    _fold_assignments,
    cv_select,
    fit_lasso_cv,
    fit_learner,
)
from .panel import CONTROL_COLUMNS

OUTCOME_COLUMNS = {"excess_return": "excess_ret", "crash_020": "crash_020"}
TREATMENT_COLUMNS = {
    "esg_agg": "esg_l1",
    "e_score": "e_score_l1",
    "s_score": "s_score_l1",
    "g_score": "g_score_l1",
}
CONTROL_LAGS = tuple(f"{c}_l1" for c in CONTROL_COLUMNS)
LEARNER_ORDER = ("lasso", "random_forest", "gbm")
REGIMES = ("stress", "nonstress")


@dataclass(frozen=True)
class DmlConfig:
    """One cell: regime x outcome x treatment x learner."""

    outcome: str = "excess_return"
    treatment: str = "esg_agg"
    learner: str = "lasso"
    regime: str = "stress"
    n_folds: int = 5
    seed: int = 0
    cv_folds: int = 5
    learner_params: dict | None = None
    cv_grid: tuple | None = None
    interactions: bool = False

    def __post_init__(self):
        if self.n_folds < 2:
            raise ValueError(f"n_folds must be >= 2, got {self.n_folds}")
        if self.outcome not in OUTCOME_COLUMNS:
            raise ValueError(f"unknown outcome {self.outcome}; valid: {sorted(OUTCOME_COLUMNS)}")
        if self.treatment not in TREATMENT_COLUMNS:
            raise ValueError(f"unknown treatment {self.treatment}; valid: {sorted(TREATMENT_COLUMNS)}")
        if self.regime not in REGIMES:
            raise ValueError(f"unknown regime {self.regime}; valid: {REGIMES}")


@dataclass
class DmlEstimate:
    """Final-stage estimate with clustered inference and fold diagnostics."""

    beta: float
    se: float
    z: float
    p: float
    n_obs: int
    n_clusters: int
    n_folds: int
    fold_diagnostics: list = field(default_factory=list)
    residual_moments: dict = field(default_factory=dict)
    config: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)


def _cell_seed(seed: int, *indices) -> int:
    key = int(seed) & ((1 << 64) - 1)
    for ix in indices:
        key = _kernels.derive_key(key, int(ix) + 1)
    return key


def _fit_nuisance(learner, X, y, *, seed, cv_folds, groups, learner_params, cv_grid):
    if learner == "lasso":
        model = fit_lasso_cv(X, y, learner_params, n_folds=cv_folds, seed=seed, groups=groups)
        chosen = {"lam": model.params["lam"], "lambda_index": model.details["lambda_index"]}
        return model, chosen
    defaults = FOREST_DEFAULTS if learner == "random_forest" else GBM_DEFAULTS
    if cv_grid:
        best, _ = cv_select(learner, X, y, list(cv_grid), n_folds=cv_folds, seed=seed, groups=groups)
    else:
        best = dict(learner_params or {})
    model = fit_learner(learner, X, y, best, seed=seed)
    return model, {**defaults, **best}


def crossfit_residuals(
    y,
    d,
    W,
    month_codes,
    *,
    learner: str = "lasso",
    n_folds: int = 5,
    seed: int = 0,
    cv_folds: int = 5,
    learner_params=None,
    cv_grid=None,
):
    """Out-of-fold nuisance residuals (Ytil, Dtil, diagnostics).

    Folds partition months, not rows. Each fold's nuisances are fit on the
    complement only; a constant outcome or treatment in a training
    complement is an error naming the fold. sum(Dtil^2) below 1e-12 * n
    raises "treatment fully explained by controls".
    """
    y = np.asarray(y, dtype=float)
    d = np.asarray(d, dtype=float)
    W = np.asarray(W, dtype=float)
    month_codes = np.asarray(month_codes)
    n = y.shape[0]
    n_months = np.unique(month_codes).shape[0]
    if n_folds > n_months:
        raise ValueError(f"n_folds={n_folds} exceeds the {n_months} distinct months")
    folds = _fold_assignments(n, n_folds, seed, groups=month_codes)
    ytil = np.empty(n)
    dtil = np.empty(n)
    diagnostics = []
    for k in range(n_folds):
        va = folds == k
        tr = ~va
        if not va.any():
            continue
        if np.var(y[tr]) == 0.0:
            raise DegenerateOutcomeError(f"fold {k}: outcome constant in the training complement")
        if np.var(d[tr]) == 0.0:
            raise DegenerateOutcomeError(f"fold {k}: treatment constant in the training complement")
        seed_m = _cell_seed(seed, k, 0)
        seed_g = _cell_seed(seed, k, 1)
        m_hat, m_sel = _fit_nuisance(
            learner, W[tr], y[tr], seed=seed_m, cv_folds=cv_folds,
            groups=month_codes[tr], learner_params=learner_params, cv_grid=cv_grid,
        )
        g_hat, g_sel = _fit_nuisance(
            learner, W[tr], d[tr], seed=seed_g, cv_folds=cv_folds,
            groups=month_codes[tr], learner_params=learner_params, cv_grid=cv_grid,
        )
        pm = m_hat.predict(W[va])
        pg = g_hat.predict(W[va])
        ytil[va] = y[va] - pm
        dtil[va] = d[va] - pg
        diagnostics.append(
            {
                "fold": k,
                "n_train": int(tr.sum()),
                "n_val": int(va.sum()),
                "val_mse_outcome": float(np.mean((y[va] - pm) ** 2)),
                "val_mse_treatment": float(np.mean((d[va] - pg) ** 2)),
                "selected_outcome": m_sel,
                "selected_treatment": g_sel,
            }
        )
    if float(dtil @ dtil) < 1e-12 * n:
        raise DegenerateOutcomeError("treatment fully explained by controls")
    return ytil, dtil, diagnostics


def final_stage(ytil, dtil, month_codes) -> DmlEstimate:
    """No-intercept regression of Ytil on Dtil with month-clustered sandwich."""
    ytil = np.asarray(ytil, dtype=float)
    dtil = np.asarray(dtil, dtype=float)
    labels = np.asarray(month_codes)
    denom = float(dtil @ dtil)
    if denom <= 0.0:
        raise ValueError("sum(Dtil^2) must be positive")
    uniq, codes = np.unique(labels, return_inverse=True)
    G = uniq.shape[0]
    if G < 2:
        raise ValueError("clustered inference needs at least 2 clusters")
    beta = float(dtil @ ytil) / denom
    eps = ytil - beta * dtil
    score = dtil * eps
    sg = np.zeros(G)
    np.add.at(sg, codes, score)
    meat = float(sg @ sg) * G / (G - 1.0)
    se = float(np.sqrt(meat) / denom)
    z = beta / se if se > 0 else np.inf * np.sign(beta)
    p = float(2.0 * scipy.stats.norm.sf(abs(z)))
    return DmlEstimate(
        beta=beta,
        se=se,
        z=float(z),
        p=p,
        n_obs=int(ytil.shape[0]),
        n_clusters=int(G),
        n_folds=0,
        residual_moments={
            "mean_dtil": float(np.mean(dtil)),
            "mean_ytil": float(np.mean(ytil)),
            "sum_dtil_sq": denom,
        },
    )


def _interaction_expand(W: np.ndarray, names: list):
    """Pairwise products of the lagged control block (sector dummies excluded)."""
    ctl = [i for i, c in enumerate(names) if c in CONTROL_LAGS]
    cols = [W]
    out_names = list(names)
    for a in range(len(ctl)):
        for b in range(a + 1, len(ctl)):
            i, j = ctl[a], ctl[b]
            cols.append((W[:, i] * W[:, j])[:, None])
            out_names.append(f"{names[i]}_x_{names[j]}")
    return np.hstack(cols), out_names


def _dml_frame_arrays(panel, regime, config: DmlConfig):
    """Rows, outcome, treatment, W, and month codes for one regime cell."""
    from .design import nuisance_matrix

    outcome_col = OUTCOME_COLUMNS[config.outcome]
    treat_col = TREATMENT_COLUMNS[config.treatment]
    frame = panel.frame
    if outcome_col == "crash_020" and outcome_col not in frame.columns:
        panel = panel._with_column("crash_020", crash_indicator(frame["ret"], 0.20), "indicator")
        frame = panel.frame
    for col, what in ((outcome_col, "outcome"), (treat_col, "treatment")):
        if col not in frame.columns:
            raise KeyError(f"{what} column {col} not in panel; run the upstream pipeline stages first")
    mask, W, wnames = nuisance_matrix(panel, regime, extra_required=(outcome_col, treat_col))
    sub = frame[mask]
    stress_by_month = dict(zip(regime.months, regime.stress))
    stress = np.array([stress_by_month[m] for m in sub["month"]], dtype=bool)
    pick = stress if config.regime == "stress" else ~stress
    y = sub[outcome_col].to_numpy(dtype=float)[pick]
    d = sub[treat_col].to_numpy(dtype=float)[pick]
    Wp = W[pick]
    months = sub["month"].to_numpy()[pick]
    _, codes = np.unique(months.astype(str), return_inverse=True)
    if config.interactions:
        Wp, wnames = _interaction_expand(Wp, wnames)
    n_excluded = int(len(frame) - len(sub))
    return y, d, Wp, wnames, codes, n_excluded


def dml_cell(panel, regime, config: DmlConfig) -> DmlEstimate:
    """One regime x outcome x treatment x learner estimate."""
    y, d, W, wnames, codes, n_excluded = _dml_frame_arrays(panel, regime, config)
    cell_key = _cell_seed(
        config.seed,
        REGIMES.index(config.regime),
        sorted(OUTCOME_COLUMNS).index(config.outcome),
        sorted(TREATMENT_COLUMNS).index(config.treatment),
        LEARNER_ORDER.index(config.learner),
    )
    ytil, dtil, diagnostics = crossfit_residuals(
        y,
        d,
        W,
        codes,
        learner=config.learner,
        n_folds=config.n_folds,
        seed=cell_key,
        cv_folds=config.cv_folds,
        learner_params=config.learner_params,
        cv_grid=config.cv_grid,
    )
    est = final_stage(ytil, dtil, codes)
    est.n_folds = config.n_folds
    est.fold_diagnostics = diagnostics
    est.config = {
        "outcome": config.outcome,
        "treatment": config.treatment,
        "learner": config.learner,
        "regime": config.regime,
        "n_folds": config.n_folds,
        "seed": config.seed,
        "interactions": config.interactions,
        "n_rows_excluded_missing": n_excluded,
        "controls": wnames,
    }
    return est


def dml_matrix(
    panel,
    regime,
    *,
    outcomes=("crash_020", "excess_return"),
    learners=("lasso", "random_forest"),
    treatment: str = "esg_agg",
    n_folds: int = 5,
    seed: int = 0,
    cv_folds: int = 5,
    learner_params=None,
    interactions: bool = False,
) -> dict:
    """Regime x outcome x learner grid of estimates with stars.

    Cells fail independently; a failed cell carries an error string instead
    of numbers. learner_params may map learner kind -> params dict.
    """
    cells = []
    for outcome in outcomes:
        for learner in learners:
            for reg in REGIMES:
                cfg = DmlConfig(
                    outcome=outcome,
                    treatment=treatment,
                    learner=learner,
                    regime=reg,
                    n_folds=n_folds,
                    seed=seed,
                    cv_folds=cv_folds,
                    learner_params=(learner_params or {}).get(learner),
                    interactions=interactions,
                )
                row = {"outcome": outcome, "learner": learner, "regime": reg, "treatment": treatment}
                try:
                    est = dml_cell(panel, regime, cfg)
                    row.update(
                        beta=est.beta,
                        se=est.se,
                        z=est.z,
                        p=est.p,
                        n_obs=est.n_obs,
                        n_clusters=est.n_clusters,
                        star="*" if est.p < 0.05 else "",
                        ci_lo=est.beta - 1.959963984540054 * est.se,
                        ci_hi=est.beta + 1.959963984540054 * est.se,
                    )
                    row["estimate"] = est
                except Exception as exc:
                    row["error"] = f"{type(exc).__name__}: {exc}"
                cells.append(row)
    return {"cells": cells, "treatment": treatment, "seed": seed}


def pillar_matrix(
    panel,
    regime,
    *,
    outcomes=("crash_020", "excess_return"),
    n_folds: int = 5,
    seed: int = 0,
    cv_folds: int = 5,
    learner_params=None,
) -> dict:
    """Aggregate + three pillar treatments under the lasso nuisances.

    Emits point estimates and normal 95% CIs per regime x outcome x
    treatment, figure-ready.
    """
    missing = [
        TREATMENT_COLUMNS[t]
        for t in ("e_score", "s_score", "g_score")
        if TREATMENT_COLUMNS[t] not in panel.frame.columns
    ]
    if missing:
        raise KeyError(f"pillar treatments need lagged columns {missing}")
    rows = []
    for treatment in ("esg_agg", "e_score", "s_score", "g_score"):
        out = dml_matrix(
            panel,
            regime,
            outcomes=outcomes,
            learners=("lasso",),
            treatment=treatment,
            n_folds=n_folds,
            seed=seed,
            cv_folds=cv_folds,
            learner_params={"lasso": learner_params} if learner_params else None,
        )
        for c in out["cells"]:
            c.pop("estimate", None)
            rows.append(c)
    return {"cells": rows, "seed": seed}
