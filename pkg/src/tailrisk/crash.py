"""Crash-event logits by regime with month-clustered inference.

Two nested specifications: the parsimonious one regresses the crash flag on
an intercept, sector indicators, and the lagged treatment score; the second
adds the lagged standardized controls. Fits are maximum likelihood via
damped Newton (step-halving), and standard errors come from the clustered
sandwich H^-1 (sum_g s_g s_g') H^-1 with a G/(G-1) small-sample factor,
clusters being calendar months.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.stats

from .design import Design, assemble_design, check_full_rank
from .errors import DegenerateOutcomeError
from .quantile import month_row_groups, stratified_month_block_bootstrap

DEFAULT_THRESHOLD = 0.20
THRESHOLD_GRID = (0.15, 0.20, 0.25)
SEPARATION_COEF_BOUND = 15.0


@dataclass(frozen=True)
class CrashConfig:
    """Crash threshold c: event is ret < -c, strict."""

    threshold: float = DEFAULT_THRESHOLD

    def __post_init__(self):
        if not 0.0 < self.threshold < 1.0:
            raise ValueError(f"crash threshold must be in (0, 1), got {self.threshold}")


@dataclass
class LogitFit:
    """One regime x specification cell."""

    spec: str
    regime: str
    columns: list
    coef: np.ndarray
    cov_clustered: np.ndarray | None
    z: np.ndarray | None
    p_values: np.ndarray | None
    n_obs: int
    n_clusters: int
    converged: bool
    iterations: int
    loglik: float
    score_max: float
    separated: bool = False
    small_sample_factor: float = float("nan")
    flags: list = field(default_factory=list)
    _X: np.ndarray = field(default=None, repr=False)
    _y: np.ndarray = field(default=None, repr=False)

    def named(self, column: str) -> float:
        return float(self.coef[self.columns.index(column)])

    def named_z(self, column: str) -> float:
        return float(self.z[self.columns.index(column)])

    def named_p(self, column: str) -> float:
        return float(self.p_values[self.columns.index(column)])


def crash_indicator(ret, threshold: float):
    """1{ret < -c}, strict; missing returns stay missing."""
    r = np.asarray(ret, dtype=float)
    out = np.where(np.isnan(r), np.nan, (r < -threshold).astype(float))
    return out


def _loglik(y, eta):
    # sum y*eta - log(1 + exp(eta)), computed stably
    return float(np.sum(y * eta - np.logaddexp(0.0, eta)))


def fit_logit(
    y,
    X,
    columns,
    clusters=None,
    *,
    spec: str = "",
    regime: str = "",
    max_iter: int = 100,
    max_halvings: int = 20,
    score_tol: float = 1e-8,
) -> LogitFit:
    """Damped-Newton ML logit; clustered covariance attached when given.

    Convergence: sup-norm of the score below ``score_tol`` (or below
    1e-12 * n as a relative backstop). Quasi-separation (any |coef| above 15
    while the likelihood still improves) flags the fit rather than erroring.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    ones = float(np.sum(y))
    if ones == 0.0 or ones == n:
        raise DegenerateOutcomeError(
            f"degenerate outcome: {int(ones)} events in {n} rows ({spec or 'logit'} {regime})".strip()
        )
    check_full_rank(X, columns, context=f"logit design {spec} {regime}".strip())

    beta = np.zeros(p)
    eta = X @ beta
    ll = _loglik(y, eta)
    separated = False
    improving = False
    it = 0
    for it in range(1, max_iter + 1):
        prob = 1.0 / (1.0 + np.exp(-eta))
        score = X.T @ (y - prob)
        smax = float(np.max(np.abs(score)))
        if smax < score_tol or smax < 1e-12 * n:
            break
        w = prob * (1.0 - prob)
        H = X.T @ (X * w[:, None])
        try:
            direction = np.linalg.solve(H, score)
        except np.linalg.LinAlgError:
            direction = np.linalg.lstsq(H, score, rcond=None)[0]
        step = 1.0
        improved = False
        for _ in range(max_halvings + 1):
            cand = beta + step * direction
            eta_c = X @ cand
            ll_c = _loglik(y, eta_c)
            if ll_c > ll:
                improved = True
                break
            step *= 0.5
        if not improved:
            # float plateau: the likelihood can stop resolving while the
            # score is still above tolerance; accept the full Newton step
            # whenever it shrinks the score norm (quadratic near optimum)
            cand = beta + direction
            eta_c = X @ cand
            prob_c = 1.0 / (1.0 + np.exp(-eta_c))
            smax_c = float(np.max(np.abs(X.T @ (y - prob_c))))
            if smax_c < smax:
                beta, eta, ll = cand, eta_c, _loglik(y, eta_c)
                continue
            break
        improving = ll_c > ll
        beta, eta, ll = cand, eta_c, ll_c
        if improving and float(np.max(np.abs(beta))) > SEPARATION_COEF_BOUND:
            separated = True

    prob = 1.0 / (1.0 + np.exp(-eta))
    score = X.T @ (y - prob)
    score_max = float(np.max(np.abs(score)))
    converged = bool(score_max < score_tol or score_max < 1e-12 * n)
    flags = []
    if separated:
        flags.append("quasi-separation: coefficient path diverging while likelihood improves")
    if not converged:
        flags.append(f"not converged: max |score| = {score_max:.3e}")

    fit = LogitFit(
        spec=spec,
        regime=regime,
        columns=list(columns),
        coef=beta,
        cov_clustered=None,
        z=None,
        p_values=None,
        n_obs=n,
        n_clusters=0,
        converged=converged,
        iterations=it,
        loglik=ll,
        score_max=score_max,
        separated=separated,
        flags=flags,
        _X=X,
        _y=y,
    )
    if clusters is not None:
        attach_clustered_inference(fit, clusters)
    return fit


def cluster_robust_cov(fit: LogitFit, clusters) -> np.ndarray:
    """Clustered sandwich H^-1 (sum_g s_g s_g') H^-1 * G/(G-1).

    s_g is the within-cluster sum of per-row scores x_i (y_i - p_i) and H
    the observed information at the optimum. Requires >= 2 clusters.
    """
    X, y = fit._X, fit._y
    labels = np.asarray(clusters)
    if labels.shape[0] != fit.n_obs:
        raise ValueError("cluster labels must align with fit rows")
    uniq, codes = np.unique(labels, return_inverse=True)
    G = uniq.shape[0]
    if G < 2:
        raise ValueError("clustered covariance needs at least 2 clusters")
    eta = X @ fit.coef
    prob = 1.0 / (1.0 + np.exp(-eta))
    S = X * (y - prob)[:, None]
    Sg = np.zeros((G, X.shape[1]))
    np.add.at(Sg, codes, S)
    meat = Sg.T @ Sg
    w = prob * (1.0 - prob)
    H = X.T @ (X * w[:, None])
    Hinv = np.linalg.inv(H)
    factor = G / (G - 1.0)
    cov = factor * (Hinv @ meat @ Hinv)
    cov = 0.5 * (cov + cov.T)
    return cov


def attach_clustered_inference(fit: LogitFit, clusters) -> LogitFit:
    labels = np.asarray(clusters)
    cov = cluster_robust_cov(fit, labels)
    G = int(np.unique(labels).shape[0])
    se = np.sqrt(np.diag(cov))
    z = fit.coef / se
    fit.cov_clustered = cov
    fit.z = z
    fit.p_values = 2.0 * scipy.stats.norm.sf(np.abs(z))
    fit.n_clusters = G
    fit.small_sample_factor = G / (G - 1.0)
    return fit


def odds_ratios(beta: float, units=(1, 5)) -> dict:
    """exp(k*beta) per unit step k."""
    return {int(k): float(np.exp(k * beta)) for k in units}


def _crash_design(panel, regime, threshold: float, with_controls: bool) -> Design:
    frame = panel.frame
    col = f"crash_{int(round(threshold * 100)):03d}"
    if col not in frame.columns:
        work = panel._with_column(col, crash_indicator(frame["ret"], threshold), "indicator")
    else:
        work = panel
    return assemble_design(
        work, regime, outcome=col, with_stress_terms=False, with_controls=with_controls
    )


def fit_regime_logits(
    panel,
    regime,
    config: CrashConfig = CrashConfig(),
    *,
    sample_mode: str = "max",
    units=(1, 5),
) -> dict:
    """Four cells: {A, B} x {stress, nonstress}, plus a comparison table.

    ``sample_mode="max"`` fits each specification on its own largest sample
    (the no-controls fit keeps rows with missing controls);
    ``"common"`` restricts both specifications to the with-controls rows.
    A failed cell is reported as {"error": ...} without aborting the rest.
    """
    if sample_mode not in ("max", "common"):
        raise ValueError(f"unknown sample_mode: {sample_mode}")
    if sample_mode == "common":
        # both specifications on the rows that carry complete controls
        from .design import CONTROL_LAGS

        frame = panel.frame
        mask = np.ones(len(frame), dtype=bool)
        for c in CONTROL_LAGS:
            mask &= frame[c].notna().to_numpy()
        panel = panel.replace(frame=frame[mask].reset_index(drop=True))
    cells = {}
    rows = []
    for spec_tag, with_controls in (("A", False), ("B", True)):
        design = _crash_design(panel, regime, config.threshold, with_controls)
        for regime_tag in ("stress", "nonstress"):
            mask = design.stress if regime_tag == "stress" else ~design.stress
            cell = design.subset(mask)
            cell, dropped = cell.drop_empty_columns()
            key = (spec_tag, regime_tag)
            try:
                fit = fit_logit(
                    cell.y,
                    cell.X,
                    cell.columns,
                    clusters=cell.month_codes,
                    spec=spec_tag,
                    regime=regime_tag,
                )
            except Exception as exc:  # propagate per cell, keep going
                cells[key] = {"error": f"{type(exc).__name__}: {exc}"}
                continue
            if dropped:
                fit.flags.append(f"dropped empty columns: {dropped}")
            cells[key] = fit
            beta = fit.named("esg_l1")
            ors = odds_ratios(beta, units)
            row = {
                "spec": spec_tag,
                "regime": regime_tag,
                "threshold": config.threshold,
                "esg_coef": beta,
                "esg_z": fit.named_z("esg_l1"),
                "esg_p": fit.named_p("esg_l1"),
                "n_obs": fit.n_obs,
                "n_clusters": fit.n_clusters,
                "converged": fit.converged,
                "separated": fit.separated,
            }
            for k, v in ors.items():
                row[f"or_{k}"] = v
            rows.append(row)
    return {"cells": cells, "table": rows, "sample_mode": sample_mode, "threshold": config.threshold}


def quintile_gap(
    panel,
    regime,
    config: CrashConfig = CrashConfig(),
    *,
    n_boot: int = 800,
    seed: int = 0,
) -> dict:
    """Descriptive crash rates by treatment quintile and the Q1-Q5 stress gap.

    Quintiles are formed on the pooled estimation sample (both regimes), so
    membership is regime-independent. Rates are percentages; the gap is
    bottom-minus-top in percentage points with a stratified month-block
    bootstrap percentile CI (quintiles re-formed inside each replicate).
    """
    col = f"crash_{int(round(config.threshold * 100)):03d}"
    work = panel
    if col not in panel.frame.columns:
        work = panel._with_column(col, crash_indicator(panel.frame["ret"], config.threshold), "indicator")
    design = assemble_design(work, regime, outcome=col, with_stress_terms=False, with_controls=False)
    esg_col = design.columns.index("esg_l1")
    esg = design.X[:, esg_col]
    if np.unique(esg).size < 5:
        raise ValueError("need at least 5 distinct treatment values to form quintiles")

    def rates_and_gap(esg_v, y_v, stress_v):
        qs = np.quantile(esg_v, [0.2, 0.4, 0.6, 0.8])
        bins = np.searchsorted(qs, esg_v, side="right")
        out_rates = np.full((5, 2), np.nan)
        for q in range(5):
            for s, sel in ((1, stress_v), (0, ~stress_v)):
                m = (bins == q) & sel
                if m.any():
                    out_rates[q, s] = float(np.mean(y_v[m])) * 100.0
        gap_v = out_rates[0, 1] - out_rates[4, 1]
        return out_rates, gap_v

    rates, gap = rates_and_gap(esg, design.y, design.stress)

    month_flags = np.zeros(len(design.months), dtype=bool)
    groups = month_row_groups(design)
    for code, rws in enumerate(groups):
        if rws.size:
            month_flags[code] = bool(design.stress[rws[0]])
    draws = stratified_month_block_bootstrap(design.months, month_flags, n_boot, seed)
    reps = []
    n_failed = 0
    for draw in draws:
        rows = np.concatenate([groups[int(m)] for m in draw])
        _, g = rates_and_gap(design.X[rows, esg_col], design.y[rows], design.stress[rows])
        if np.isnan(g):
            n_failed += 1
        else:
            reps.append(g)
    reps = np.sort(np.asarray(reps))
    lo, hi = (np.percentile(reps, [2.5, 97.5]) if reps.size else (np.nan, np.nan))
    return {
        "threshold": config.threshold,
        "rates_stress": rates[:, 1].tolist(),
        "rates_nonstress": rates[:, 0].tolist(),
        "gap_stress_pp": float(gap),
        "gap_ci": [float(lo), float(hi)],
        "n_boot": n_boot,
        "n_failed_replicates": n_failed,
        "seed": seed,
        "n_obs": design.n_obs,
    }


def threshold_sweep(
    panel,
    regime,
    grid=THRESHOLD_GRID,
    *,
    n_boot: int = 800,
    seed: int = 0,
    sample_mode: str = "max",
) -> dict:
    """Descriptives (panel A) and with-controls logits (panel B) per threshold.

    The stress classification is held fixed across the grid. The crash count
    is non-increasing in the threshold by construction.
    """
    panel_a = []
    panel_b = []
    for c in grid:
        cfg = CrashConfig(threshold=float(c))
        panel_a.append(quintile_gap(panel, regime, cfg, n_boot=n_boot, seed=seed))
        res = fit_regime_logits(panel, regime, cfg, sample_mode=sample_mode)
        for row in res["table"]:
            if row["spec"] == "B":
                panel_b.append(row)
    return {"panel_a": panel_a, "panel_b": panel_b, "grid": list(grid)}
