"""Self-contained supervised learners for the DML nuisance fits.

Three kinds share one ``FittedLearner`` contract:

* ``lasso``    cyclic coordinate descent with soft thresholding; internal
  standardization; intercept unpenalized (handled by centering)
* ``random_forest``    bagged variance-reduction CART trees with per-split
  feature subsampling
* ``gbm``    stagewise least-squares boosting on residuals with shallow trees

Forest randomness comes from the package's integer counter PRNG keyed by
(seed, tree index) and (tree seed, node id), so fits are bitwise
deterministic for a given (data, hyperparameters, seed) on either kernel
path. GBM uses no randomness at all.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import _kernels

LASSO_DEFAULTS = {"n_lambdas": 30, "lambda_min_ratio": 1e-3, "tol": 1e-7, "max_sweeps": 2000}
FOREST_DEFAULTS = {"n_trees": 200, "max_depth": 6, "min_leaf": 5, "feature_fraction": 1.0 / 3.0}
GBM_DEFAULTS = {"n_rounds": 200, "learning_rate": 0.1, "max_depth": 2, "min_leaf": 5}

KINDS = ("lasso", "random_forest", "gbm")


@dataclass
class FittedLearner:
    """Fitted regression model with a uniform predict contract."""

    kind: str
    params: dict
    state: dict = field(repr=False)
    details: dict = field(default_factory=dict)

    def predict(self, X) -> np.ndarray:
        X = np.ascontiguousarray(np.asarray(X, dtype=float))
        if self.kind == "lasso":
            return self.state["intercept"] + X @ self.state["coef"]
        if self.kind == "random_forest":
            trees = self.state["trees"]
            if not trees:
                return np.full(X.shape[0], self.state["train_mean"])
            acc = np.zeros(X.shape[0])
            for t in trees:
                acc += _kernels.tree_predict(*t, X)
            return acc / len(trees)
        if self.kind == "gbm":
            out = np.full(X.shape[0], self.state["base"])
            rate = self.params["learning_rate"]
            for t in self.state["trees"]:
                out += rate * _kernels.tree_predict(*t, X)
            return out
        raise ValueError(f"unknown learner kind: {self.kind}")


def _merge_params(defaults: dict, params) -> dict:
    params = dict(params or {})
    unknown = set(params) - set(defaults)
    if unknown:
        raise ValueError(f"unknown hyperparameters {sorted(unknown)}; valid: {sorted(defaults)}")
    return {**defaults, **params}


# ---------------------------------------------------------------------------
# lasso
# ---------------------------------------------------------------------------

def _standardize(X):
    mu = X.mean(axis=0)
    sd = np.sqrt(np.mean((X - mu) ** 2, axis=0))
    sd_safe = np.where(sd > 0.0, sd, 1.0)
    return (X - mu) / sd_safe, mu, sd, sd_safe


def lasso_lambda_grid(X, y, n_lambdas: int = 30, min_ratio: float = 1e-3) -> np.ndarray:
    """Descending log-spaced grid from lambda_max (all-zero solution) down."""
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    Xs, _, _, _ = _standardize(X)
    yc = y - y.mean()
    lam_max = float(np.max(np.abs(Xs.T @ yc)) / y.shape[0])
    if lam_max <= 0.0:
        lam_max = 1e-12
    return np.geomspace(lam_max, lam_max * min_ratio, n_lambdas)


def _lasso_path_std(X, y, lams, tol, max_sweeps):
    """Path on the internally standardized problem; returns coefs + transforms."""
    Xs, mu, sd, sd_safe = _standardize(X)
    ybar = float(y.mean())
    yc = y - ybar
    Xf = np.asfortranarray(Xs)
    B, sweeps, conv = _kernels.lasso_path(Xf, yc.copy(), np.asarray(lams, dtype=float), tol, max_sweeps)
    return B, sweeps, conv, (Xs, yc, mu, sd, sd_safe, ybar)


def fit_lasso(X, y, lam: float, params=None) -> FittedLearner:
    """Single-penalty lasso on the standardized design.

    Objective: (1/2n)||yc - Xs b||^2 + lam * sum|b_j| with Xs column-
    standardized and yc centered; the returned coefficients and intercept
    are mapped back to the original scale. Zero-variance columns get exact
    zero coefficients. KKT diagnostics land in ``details``.
    """
    p = _merge_params(LASSO_DEFAULTS, params)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if lam < 0.0:
        raise ValueError(f"lam must be >= 0, got {lam}")
    B, sweeps, conv, (Xs, yc, mu, sd, sd_safe, ybar) = _lasso_path_std(
        X, y, np.array([lam]), p["tol"], p["max_sweeps"]
    )
    b_std = B[0]
    n = y.shape[0]
    resid = yc - Xs @ b_std
    corr = Xs.T @ resid / n
    active = b_std != 0.0
    kkt_inactive = float(np.max(np.abs(corr[~active]) - lam)) if (~active).any() else -np.inf
    kkt_active = float(np.max(np.abs(corr[active] - lam * np.sign(b_std[active])))) if active.any() else 0.0
    coef = b_std / sd_safe
    coef[sd == 0.0] = 0.0
    intercept = ybar - float(mu @ coef)
    return FittedLearner(
        kind="lasso",
        params={**p, "lam": float(lam)},
        state={"coef": coef, "intercept": intercept, "coef_standardized": b_std},
        details={
            "sweeps": int(sweeps[0]),
            "converged": bool(conv[0]),
            "n_nonzero": int(active.sum()),
            "kkt_max_inactive_excess": kkt_inactive,
            "kkt_max_active_gap": kkt_active,
        },
    )


def _fold_assignments(n: int, n_folds: int, seed: int, groups=None) -> np.ndarray:
    """Deterministic fold labels; group-aware when labels are given."""
    rng = np.random.default_rng([int(seed), 0xF01D])
    if groups is None:
        perm = rng.permutation(n)
        folds = np.empty(n, dtype=np.int64)
        for k, chunk in enumerate(np.array_split(perm, n_folds)):
            folds[chunk] = k
        return folds
    groups = np.asarray(groups)
    uniq = np.unique(groups)
    perm = rng.permutation(uniq.shape[0])
    gfold = np.empty(uniq.shape[0], dtype=np.int64)
    for k, chunk in enumerate(np.array_split(perm, n_folds)):
        gfold[chunk] = k
    lookup = {u: gfold[i] for i, u in enumerate(uniq)}
    return np.array([lookup[g] for g in groups], dtype=np.int64)


def fit_lasso_cv(
    X,
    y,
    params=None,
    *,
    n_folds: int = 5,
    seed: int = 0,
    groups=None,
) -> FittedLearner:
    """Path-based K-fold CV over the descending penalty grid.

    Tie-break is most-regularized-first with strict improvement: scanning
    from the largest penalty, a smaller one is adopted only when its CV MSE
    is strictly lower. The final fit re-runs the path on the full sample and
    keeps the chosen penalty.
    """
    p = _merge_params(LASSO_DEFAULTS, params)
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    n = y.shape[0]
    lams = lasso_lambda_grid(X, y, p["n_lambdas"], p["lambda_min_ratio"])
    folds = _fold_assignments(n, n_folds, seed, groups)
    mse = np.zeros(lams.shape[0])
    for k in range(n_folds):
        tr = folds != k
        va = ~tr
        if not va.any() or not tr.any():
            continue
        B, _, _, (Xs, yc, mu, sd, sd_safe, ybar) = _lasso_path_std(
            X[tr], y[tr], lams, p["tol"], p["max_sweeps"]
        )
        coefs = B / sd_safe[None, :]
        coefs[:, sd == 0.0] = 0.0
        inter = ybar - coefs @ mu
        pred = X[va] @ coefs.T + inter[None, :]
        mse += np.sum((y[va][:, None] - pred) ** 2, axis=0)
    mse /= n
    best = 0
    for i in range(1, lams.shape[0]):
        if mse[i] < mse[best]:
            best = i
    fit = fit_lasso(X, y, float(lams[best]), params)
    fit.details["cv_mse"] = mse.tolist()
    fit.details["lambda_grid"] = lams.tolist()
    fit.details["lambda_index"] = int(best)
    return fit


# ---------------------------------------------------------------------------
# trees: random forest and gbm
# ---------------------------------------------------------------------------

def fit_forest(X, y, params=None, seed: int = 0) -> FittedLearner:
    """Bagged CART regression forest.

    Each tree draws n rows with replacement keyed by (seed, tree index) and
    subsamples ceil(feature_fraction * p) features per split. max_depth = 0
    or n_trees = 0 degenerate to the training-mean predictor.
    """
    p = _merge_params(FOREST_DEFAULTS, params)
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, n_feat = X.shape
    train_mean = float(y.mean())
    trees = []
    if p["n_trees"] > 0 and p["max_depth"] > 0:
        k_feats = max(1, math.ceil(p["feature_fraction"] * n_feat))
        for t in range(p["n_trees"]):
            tkey = _kernels.derive_key(seed, t)
            u = _kernels.stream_u53_block(tkey, n)
            rows = np.minimum((u * n).astype(np.int64), n - 1)
            trees.append(
                _kernels.tree_grow(
                    X, y, rows, p["max_depth"], p["min_leaf"], k_feats, np.uint64(tkey)
                )
            )
    return FittedLearner(
        kind="random_forest",
        params=p,
        state={"trees": trees, "train_mean": train_mean},
        details={"n_trees_grown": len(trees), "seed": int(seed)},
    )


def fit_gbm(X, y, params=None, seed: int = 0) -> FittedLearner:
    """Stagewise least-squares boosting; deterministic (no row/feature draws).

    Model: base mean + learning_rate * sum of shallow CART trees fitted to
    the running residuals. ``seed`` is accepted for interface uniformity.
    """
    p = _merge_params(GBM_DEFAULTS, params)
    X = np.ascontiguousarray(np.asarray(X, dtype=float))
    y = np.asarray(y, dtype=float)
    n, n_feat = X.shape
    base = float(y.mean())
    trees = []
    if p["n_rounds"] > 0 and p["max_depth"] > 0:
        rows = np.arange(n, dtype=np.int64)
        resid = y - base
        rate = p["learning_rate"]
        for t in range(p["n_rounds"]):
            tree = _kernels.tree_grow(
                X, resid, rows, p["max_depth"], p["min_leaf"], n_feat, np.uint64(0)
            )
            trees.append(tree)
            resid = resid - rate * _kernels.tree_predict(*tree, X)
    return FittedLearner(
        kind="gbm",
        params=p,
        state={"trees": trees, "base": base},
        details={"n_rounds_grown": len(trees)},
    )


def fit_learner(kind: str, X, y, params=None, seed: int = 0) -> FittedLearner:
    """Uniform dispatcher. lasso requires params['lam'] here (see fit_lasso_cv)."""
    if kind == "lasso":
        params = dict(params or {})
        lam = params.pop("lam", None)
        if lam is None:
            raise ValueError("fit_learner('lasso', ...) needs params['lam']; use fit_lasso_cv to select it")
        return fit_lasso(X, y, lam, params)
    if kind == "random_forest":
        return fit_forest(X, y, params, seed)
    if kind == "gbm":
        return fit_gbm(X, y, params, seed)
    raise ValueError(f"unknown learner kind: {kind}; valid: {KINDS}")


def cv_select(
    kind: str,
    X,
    y,
    grid,
    *,
    n_folds: int = 5,
    seed: int = 0,
    groups=None,
):
    """Generic K-fold CV over a candidate list ordered most-regularized first.

    Returns (best_params, table). The tie-break is strict improvement while
    scanning the grid in order, so earlier (more regularized) candidates win
    ties; candidate evaluation order never depends on scheduling.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float)
    if not grid:
        raise ValueError("empty hyperparameter grid")
    folds = _fold_assignments(y.shape[0], n_folds, seed, groups)
    table = []
    best_idx = 0
    best_mse = np.inf
    for i, cand in enumerate(grid):
        sse = 0.0
        for k in range(n_folds):
            tr = folds != k
            va = ~tr
            if not va.any() or not tr.any():
                continue
            model = fit_learner(kind, X[tr], y[tr], cand, seed=seed)
            pred = model.predict(X[va])
            sse += float(np.sum((y[va] - pred) ** 2))
        mse = sse / y.shape[0]
        table.append({"params": dict(cand), "cv_mse": mse})
        if mse < best_mse:
            best_mse = mse
            best_idx = i
    return dict(grid[best_idx]), table
