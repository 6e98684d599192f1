"""Left-tail conditional quantile regression with month-block bootstrap CIs.

Solver strategy, recorded in every fit's metadata: minimize a uniform-kernel
smoothed (Huberized) pinball objective by gradient descent with
Barzilai-Borwein steps and Armijo backtracking, annealing the smoothing
bandwidth toward zero with warm starts, then run exact cyclic coordinate
descent on the true pinball loss (weighted-quantile line searches, see
``tailrisk._kernels.pinball_polish``), and finish with a simplex-style
vertex exchange: at the current vertex, probe the basis-edge directions
obtained by relaxing one interpolated row at a time and pivot along any
descending edge with an exact piecewise-linear line minimum. The exchange
terminates only when no edge descends, which certifies vertex optimality;
a subgradient check along coordinate directions is recorded as well.

Confidence intervals come from a stratified month-block bootstrap: each
replicate redraws, with replacement, the stress months among stress months
and the non-stress months among non-stress months, concatenating all firm
rows of every drawn month. Replicate r is a pure function of (seed, r), and
replicate estimates are sorted before percentile extraction, so threading
and scheduling cannot change the output.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .design import Design, assemble_design, check_full_rank
from .errors import RankDeficientError

QUANTITIES = ("stress", "esg_nonstress", "interaction", "esg_stress_slope")


@dataclass(frozen=True)
class QuantileSpec:
    """Quantile grid and bootstrap settings."""

    tau_grid: tuple = (0.01, 0.02, 0.05, 0.10, 0.20)
    n_boot: int = 800
    seed: int = 0

    def __post_init__(self):
        for t in self.tau_grid:
            if not 0.0 < t < 1.0:
                raise ValueError(f"tau must lie in (0, 1), got {t}")
        if self.n_boot < 100:
            raise ValueError(f"n_boot must be >= 100, got {self.n_boot}")


@dataclass
class QuantileFit:
    """Point estimate at one tau (CIs attached by quantile_table)."""

    tau: float
    columns: list
    coef: np.ndarray
    objective: float
    n_obs: int
    solver: dict = field(default_factory=dict)
    ci: dict = field(default_factory=dict)
    converged: bool = True

    @property
    def stress_slope(self) -> float:
        return self.named("esg_l1") + self.named("esg_x_stress")

    def named(self, column: str) -> float:
        return float(self.coef[self.columns.index(column)])


def pinball_loss(residuals, tau: float) -> float:
    """Sum of the check function rho_tau(u) = u * (tau - 1{u < 0})."""
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    u = np.asarray(residuals, dtype=float)
    return float(np.sum(u * (tau - (u < 0.0))))


def _smoothed_obj_grad(XF, y, b, tau, h):
    """Uniform-kernel smoothed pinball objective and gradient in b."""
    r = y - XF @ b
    a = np.abs(r)
    inside = a <= h
    val = (tau - 0.5) * r + np.where(inside, r * r / (4.0 * h) + 0.25 * h, 0.5 * a)
    dpsi = (tau - 0.5) + np.where(inside, r / (2.0 * h), 0.5 * np.sign(r))
    return float(np.sum(val)), -(XF.T @ dpsi)


def _descend_smoothed(XF, y, b0, tau, h, max_iter, gtol):
    """Monotone GD with BB steps on the h-smoothed objective."""
    b = b0.copy()
    obj, g = _smoothed_obj_grad(XF, y, b, tau, h)
    n = y.shape[0]
    t = h / (np.linalg.norm(g) / n + 1e-30) / n
    prev_b = None
    prev_g = None
    for _ in range(max_iter):
        gi = float(np.max(np.abs(g)))
        if gi <= gtol:
            break
        if prev_b is not None:
            db = b - prev_b
            dg = g - prev_g
            dd = float(db @ dg)
            if dd > 0.0:
                t1 = float(db @ db) / dd
                t2 = dd / float(dg @ dg)
                t = min(t1, t2)
            else:
                t *= 2.0
        t = min(max(t, 1e-14), 1e14)
        gn2 = float(g @ g)
        ok = False
        for _h in range(50):
            cand = b - t * g
            obj_c, g_c = _smoothed_obj_grad(XF, y, cand, tau, h)
            if obj_c <= obj - 1e-4 * t * gn2:
                ok = True
                break
            t *= 0.5
        if not ok:
            break
        prev_b, prev_g = b, g
        b, obj, g = cand, obj_c, g_c
    return b


def _subgradient_violation(XF, y, b, tau, ztol: float = 0.0):
    """Worst negative directional derivative along +-e_j at b (>= 0 is optimal).

    Residuals within ztol of zero are the interpolated rows every exact
    quantile solution carries; they sit at kinks and must take the one-sided
    kink derivative, not the sign their float noise happens to have.
    """
    r = y - XF @ b
    pos = r > ztol
    neg = r < -ztol
    kink = ~(pos | neg)
    Xp = XF[pos].sum(axis=0)
    Xn = XF[neg].sum(axis=0)
    Xk = XF[kink]
    kp = Xk.clip(min=0.0).sum(axis=0)
    kn = Xk.clip(max=0.0).sum(axis=0)
    # direction +e_j: a = x; kink rows with x>0 add (1-tau)x, x<0 add -tau*x
    d_plus = -tau * Xp + (1.0 - tau) * Xn + (1.0 - tau) * kp - tau * kn
    # direction -e_j: a = -x; kink rows with x<0 add -(1-tau)x, x>0 add tau*x
    d_minus = tau * Xp - (1.0 - tau) * Xn - (1.0 - tau) * kn + tau * kp
    worst = min(float(np.min(d_plus)), float(np.min(d_minus)), 0.0)
    return -worst


def _pinball_line_min(r, g, tau):
    """Exact minimizer of t -> sum rho_tau(r - t*g), with the kink rule.

    The minimizer is the breakpoint r_i/g_i at which the cumulative |g|
    weight (in breakpoint order) first reaches tau*sum|g[g>0]| +
    (1-tau)*sum|g[g<0]|; same rule as one coordinate-descent step.
    """
    nz = g != 0.0
    if not nz.any():
        return 0.0
    gz = g[nz]
    t = r[nz] / gz
    w = np.abs(gz)
    sneg = tau * float(np.sum(w[gz > 0.0])) + (1.0 - tau) * float(np.sum(w[gz < 0.0]))
    order = np.argsort(t, kind="stable")
    cw = np.cumsum(w[order])
    k = int(np.searchsorted(cw, sneg, side="left"))
    if k >= t.shape[0]:
        k = t.shape[0] - 1
    return float(t[order[k]])


def _greedy_basis(X, r):
    """p independent rows, preferring the smallest |residual| first.

    The scan is capped (12p rows) so a pathological tie structure cannot turn
    the basis search into n rank checks; returns None when no basis is found
    inside the cap, and the caller falls back gracefully.
    """
    n, p = X.shape
    order = np.argsort(np.abs(r), kind="stable")[: min(n, 12 * p)]
    rows = []
    basis = np.empty((0, p))
    for i in order:
        cand = np.vstack([basis, X[i]])
        if np.linalg.matrix_rank(cand) > basis.shape[0]:
            basis = cand
            rows.append(int(i))
            if len(rows) == p:
                return np.array(rows, dtype=np.int64)
    return None


def _exchange_refine(X, y, b, tau, obj, ztol, max_iter=200):
    """Simplex-style vertex exchange on the pinball objective.

    Moves along basis-edge directions (relax one interpolated row, keep the
    others tight) whenever the one-sided directional derivative is negative,
    with an exact line minimum per move. Coordinate descent can stall at a
    vertex that is optimal along every coordinate but not along these edges;
    following them instead makes the stopping point a true vertex optimum.
    Returns (b, obj, n_moves, certified).
    """
    n, p = X.shape
    r = y - X @ b
    for it in range(max_iter):
        rows = _greedy_basis(X, r)
        if rows is None:
            return b, obj, it, False
        XA = X[rows]
        try:
            b_v = np.linalg.solve(XA, y[rows])
        except np.linalg.LinAlgError:
            return b, obj, it, False
        obj_v = pinball_loss(y - X @ b_v, tau)
        if obj_v <= obj + 1e-9 * (abs(obj) + 1e-12):
            if obj_v < obj:
                obj = obj_v
            b = b_v
            r = y - X @ b
        try:
            Ainv = np.linalg.inv(XA)
        except np.linalg.LinAlgError:
            return b, obj, it, False
        G = X @ Ainv
        pos = r > ztol
        neg = r < -ztol
        kink = ~pos & ~neg
        Gp = G[pos].sum(axis=0) if pos.any() else np.zeros(p)
        Gn = G[neg].sum(axis=0) if neg.any() else np.zeros(p)
        Gk = G[kink]
        # one-sided derivative along +/-G[:, a]; kink rows always push up
        kp = Gk.clip(min=0.0).sum(axis=0)
        kn = (-Gk).clip(min=0.0).sum(axis=0)
        d_plus = -tau * Gp + (1.0 - tau) * Gn + (1.0 - tau) * kp + tau * kn
        d_minus = tau * Gp - (1.0 - tau) * Gn + (1.0 - tau) * kn + tau * kp
        best_a = int(np.argmin(np.minimum(d_plus, d_minus)))
        sign = 1.0 if d_plus[best_a] <= d_minus[best_a] else -1.0
        deriv = min(d_plus[best_a], d_minus[best_a])
        gcol = sign * G[:, best_a]
        dtol = 1e-11 * (1.0 + float(np.abs(gcol).sum()))
        if deriv >= -dtol:
            # the edge certificate only proves optimality when the basis rows
            # are the interpolated rows (every direction is then a nonneg
            # combination of the probed edges)
            at_kinks = bool(np.all(np.abs(r[rows]) <= ztol))
            return b, obj, it, at_kinks
        t_star = _pinball_line_min(r, gcol, tau)
        if t_star == 0.0:
            return b, obj, it, False
        b_new = b + t_star * sign * Ainv[:, best_a]
        r_new = y - X @ b_new
        new_obj = pinball_loss(r_new, tau)
        if new_obj >= obj:
            return b, obj, it, False
        b, r, obj = b_new, r_new, new_obj
    return b, obj, max_iter, False


def fit_quantile(
    y,
    X,
    columns,
    tau: float,
    *,
    anneal: str = "full",
    warm_start=None,
    check_rank: bool = True,
    max_polish_sweeps: int = 120,
) -> QuantileFit:
    """Pinball-loss regression at one tau.

    ``anneal="full"`` runs the bandwidth schedule from a coarse start (point
    estimates); ``"short"`` runs a single small-bandwidth pass, for bootstrap
    replicates warm-started at the point estimate. Tolerances scale with a
    robust dispersion of y so fits are equivariant to scaling.
    """
    y = np.asarray(y, dtype=float)
    X = np.asarray(X, dtype=float)
    n, p = X.shape
    if not 0.0 < tau < 1.0:
        raise ValueError(f"tau must lie in (0, 1), got {tau}")
    if n < 10 * p:
        raise ValueError(f"need n >= 10 * columns for a stable tail fit, got n={n}, p={p}")
    if check_rank:
        check_full_rank(X, columns, context=f"quantile design (tau={tau})")
    XF = np.asfortranarray(X)

    med = float(np.median(y))
    scale = float(np.median(np.abs(y - med)))
    if scale <= 0.0:
        scale = float(np.std(y)) or 1.0
    base = max(0.01, np.sqrt(tau * (1.0 - tau)) * ((p + np.log(n)) / n) ** 0.4)
    h0 = base * scale
    if anneal == "full":
        schedule = [4.0 * h0, h0, 0.25 * h0, 0.0625 * h0]
        b = np.zeros(p)
        if warm_start is not None:
            b = np.asarray(warm_start, dtype=float).copy()
    elif anneal == "short":
        schedule = [0.25 * h0]
        b = np.asarray(warm_start, dtype=float).copy() if warm_start is not None else np.zeros(p)
    else:
        raise ValueError(f"unknown anneal mode: {anneal}")
    gtol = 1e-8 * n * max(scale, 1e-12)
    gd_cap = 200 if anneal == "full" else 25
    for h in schedule:
        b = _descend_smoothed(XF, y, b, tau, h, max_iter=gd_cap, gtol=gtol)

    # kink width opt_tol/n: a row within that distance of its breakpoint can
    # move the objective by at most ~opt_tol, so it cannot witness a real
    # optimality failure; replicate fits stop sweeping at bootstrap noise
    # level rather than float precision
    rtol = 1e-13 if anneal == "full" else 1e-9
    opt_tol = 1e-7 * n * max(scale, 1e-12)
    ztol = opt_tol / n
    b, obj, sweeps = _kernels.pinball_polish(XF, y, b, tau, max_polish_sweeps, rtol)
    total_sweeps = int(sweeps)
    # coordinate descent can park at a vertex that is optimal along every
    # coordinate yet still descending along a basis edge; the exchange walks
    # those edges (exact line minima) until none descends, which certifies a
    # true vertex optimum
    max_moves = 200 if anneal == "full" else 60
    b, obj, n_moves, certified = _exchange_refine(X, y, b, tau, obj, ztol, max_iter=max_moves)
    rounds = 1
    if not certified:
        # degenerate basis or stalled pivot: re-smooth once, re-polish, retry
        b2 = _descend_smoothed(XF, y, b.copy(), tau, schedule[-1] * 0.25, max_iter=120, gtol=gtol)
        b2, obj2, sweeps2 = _kernels.pinball_polish(XF, y, b2, tau, max_polish_sweeps, rtol)
        total_sweeps += int(sweeps2)
        rounds += 1
        if obj2 < obj:
            b, obj = b2, obj2
        b, obj, m2, certified = _exchange_refine(X, y, b, tau, obj, ztol, max_iter=max_moves)
        n_moves += m2

    violation = _subgradient_violation(XF, y, b, tau, ztol)
    converged = bool(certified or violation <= opt_tol)
    return QuantileFit(
        tau=tau,
        columns=list(columns),
        coef=np.asarray(b, dtype=float),
        objective=float(obj),
        n_obs=n,
        solver={
            "method": "smoothed-anneal + coordinate polish + vertex exchange",
            "bandwidths": [float(h) for h in schedule],
            "polish_sweeps": total_sweeps,
            "polish_rounds": rounds,
            "exchange_moves": int(n_moves),
            "exchange_certified": bool(certified),
            "subgradient_violation": float(violation),
            "subgradient_tol": float(opt_tol),
        },
        converged=converged,
    )


# ---------------------------------------------------------------------------
# stratified month-block bootstrap
# ---------------------------------------------------------------------------

def stratified_month_block_bootstrap(months, stress_flags, B: int, seed: int):
    """Replicate month multisets: n_stress stress + n_nonstress non-stress draws.

    ``months`` is the ordered month list, ``stress_flags`` the per-month
    stress indicator. Returns a list of B integer arrays indexing into
    ``months``; replicate r depends only on (seed, r).
    """
    stress_flags = np.asarray(stress_flags, dtype=bool)
    idx_s = np.where(stress_flags)[0]
    idx_n = np.where(~stress_flags)[0]
    if idx_s.size == 0 or idx_n.size == 0:
        raise ValueError("both regimes must be non-empty for the stratified bootstrap")
    out = []
    for r in range(B):
        rng = np.random.default_rng([int(seed), int(r)])
        ds = rng.choice(idx_s, size=idx_s.size, replace=True)
        dn = rng.choice(idx_n, size=idx_n.size, replace=True)
        out.append(np.concatenate([ds, dn]))
    return out


def replicate_rows(design: Design, month_draw) -> np.ndarray:
    """Materialize a replicate's row indices from a month multiset."""
    groups = month_row_groups(design)
    return np.concatenate([groups[int(m)] for m in month_draw])


def month_row_groups(design: Design):
    """Row-index arrays per month code (cached on the design)."""
    cached = design.meta.get("_month_row_groups")
    if cached is None:
        cached = [np.where(design.month_codes == m)[0] for m in range(len(design.months))]
        design.meta["_month_row_groups"] = cached
    return cached


def _month_stress_flags(design: Design) -> np.ndarray:
    flags = np.zeros(len(design.months), dtype=bool)
    for code in range(len(design.months)):
        rows = np.where(design.month_codes == code)[0]
        if rows.size:
            flags[code] = bool(design.stress[rows[0]])
    return flags


def _extract(fit: QuantileFit) -> dict:
    return {
        "stress": fit.named("stress"),
        "esg_nonstress": fit.named("esg_l1"),
        "interaction": fit.named("esg_x_stress"),
        "esg_stress_slope": fit.stress_slope,
    }


def quantile_table(panel, regime, spec: QuantileSpec, *, design: Design | None = None) -> dict:
    """Point estimates and bootstrap percentile CIs across the tau grid.

    Per tau: the stress level shift, the non-stress ESG slope, the
    interaction, and the stress-state ESG slope (their exact sum), each with
    a 2.5/97.5 percentile CI over surviving replicates and a star when the
    CI excludes zero. Replicates that lose full rank or fail to fit are
    dropped and counted; more than 5% failures for any tau is an error.
    """
    if design is None:
        design = assemble_design(
            panel, regime, outcome="excess_ret", with_stress_terms=True, with_controls=True
        )
    month_flags = _month_stress_flags(design)
    draws = stratified_month_block_bootstrap(
        design.months, month_flags, spec.n_boot, spec.seed
    )
    groups = month_row_groups(design)

    fits = {}
    for tau in spec.tau_grid:
        fits[tau] = fit_quantile(design.y, design.X, design.columns, tau)

    est = {tau: {q: [] for q in QUANTITIES} for tau in spec.tau_grid}
    failures = {tau: 0 for tau in spec.tau_grid}
    failure_log = []
    for r, draw in enumerate(draws):
        rows = np.concatenate([groups[int(m)] for m in draw])
        Xr = design.X[rows]
        yr = design.y[rows]
        for tau in spec.tau_grid:
            try:
                check_full_rank(Xr, design.columns, context=f"replicate {r} (tau={tau})")
                f = fit_quantile(
                    yr,
                    Xr,
                    design.columns,
                    tau,
                    anneal="short",
                    warm_start=fits[tau].coef,
                    check_rank=False,
                    max_polish_sweeps=50,
                )
            except (RankDeficientError, ValueError) as exc:
                failures[tau] += 1
                failure_log.append({"replicate": r, "tau": tau, "error": str(exc)})
                continue
            vals = _extract(f)
            for q in QUANTITIES:
                est[tau][q].append(vals[q])

    rows_out = []
    for tau in spec.tau_grid:
        n_ok = spec.n_boot - failures[tau]
        if n_ok < 0.95 * spec.n_boot:
            raise RuntimeError(
                f"too many failed bootstrap replicates at tau={tau}: "
                f"{failures[tau]} of {spec.n_boot}; log: {failure_log[:10]}"
            )
        point = _extract(fits[tau])
        row = {"tau": tau, "n_obs": fits[tau].n_obs, "n_replicates": n_ok}
        for q in QUANTITIES:
            arr = np.sort(np.asarray(est[tau][q], dtype=float))
            lo, hi = np.percentile(arr, [2.5, 97.5])
            fits[tau].ci[q] = (float(lo), float(hi))
            row[q] = point[q]
            row[f"{q}_lo"] = float(lo)
            row[f"{q}_hi"] = float(hi)
            row[f"{q}_star"] = "*" if (lo > 0.0 or hi < 0.0) else ""
            row[f"{q}_boot_median"] = float(np.median(arr))
        rows_out.append(row)

    meta = {
        "n_boot": spec.n_boot,
        "seed": spec.seed,
        "taus": list(spec.tau_grid),
        "n_failed_replicates": {str(t): failures[t] for t in spec.tau_grid},
        "solver": {str(t): fits[t].solver for t in spec.tau_grid},
        "n_obs": int(design.n_obs),
        "n_months": len(design.months),
        "n_stress_months": int(month_flags.sum()),
    }
    return {"rows": rows_out, "fits": fits, "meta": meta}
