"""Firm-month panel data model and variable construction.

The panel is a tidy frame with one row per (firm_id, month), months held as
pandas ``Period('M')`` values. All operations are pure: they return a new
``PanelDataset`` and leave the input untouched. Derived columns are tracked
in ``schema`` (name -> kind), data-quality events in ``flags``, and
reproducibility parameters (winsor bounds, z-score moments) in ``transforms``.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field

import numpy as np
import pandas as pd

from .errors import PanelFormatError

REQUIRED_COLUMNS = ("firm_id", "date", "volume_usd", "esg", "sector")
PILLAR_COLUMNS = ("e_score", "s_score", "g_score")
FUNDAMENTAL_COLUMNS = ("at", "dltt", "ib", "capx", "ppent")

# name -> (numerator, denominator); size is log(at), handled separately
RATIO_CONTROLS = {
    "lev": ("dltt", "at"),
    "prof": ("ib", "at"),
    "inv": ("capx", "at"),
    "tang": ("ppent", "at"),
}
CONTROL_COLUMNS = ("size", "lev", "prof", "inv", "tang")


@dataclass
class PanelDataset:
    """Firm-month panel plus bookkeeping for derived columns."""

    frame: pd.DataFrame
    schema: dict = field(default_factory=dict)
    flags: list = field(default_factory=list)
    transforms: dict = field(default_factory=dict)

    @property
    def months(self):
        return sorted(self.frame["month"].unique())

    def replace(self, **kw) -> "PanelDataset":
        return dataclasses.replace(self, **kw)

    def _with_column(self, name: str, values, kind: str) -> "PanelDataset":
        frame = self.frame.copy()
        frame[name] = np.asarray(values, dtype=float)
        schema = dict(self.schema)
        schema[name] = kind
        return self.replace(frame=frame, schema=schema)


def _validate_core(frame: pd.DataFrame) -> None:
    dup = frame.duplicated(subset=["firm_id", "month"])
    if dup.any():
        pair = frame.loc[dup.idxmax(), ["firm_id", "month"]]
        raise PanelFormatError(
            f"duplicate (firm_id, month) rows, first at firm={pair['firm_id']} month={pair['month']}"
        )
    ret = frame["ret"]
    bad = ret.notna() & ~np.isfinite(ret.to_numpy(dtype=float))
    if bad.any():
        raise PanelFormatError(f"{int(bad.sum())} non-finite return values; missing cells must be empty")
    vol = frame["volume_usd"]
    if (vol.dropna() < 0).any():
        raise PanelFormatError("negative volume_usd")


def _parse_month(dates: pd.Series) -> pd.PeriodIndex:
    return pd.PeriodIndex(pd.to_datetime(dates, format="mixed"), freq="M")


def load_panel_csv(path, min_days: int = 10) -> PanelDataset:
    """Load a panel CSV; monthly rows (``ret``) or daily rows (``price``).

    Daily input is compounded to firm-month returns, with realized
    volatility (sample sd of the month's daily returns) and summed dollar
    volume; other firm attributes are taken from the month's last daily row.
    Monthly input may carry an optional ``sigma`` column for the market
    weights. Missing cells are empty strings.
    """
    raw = pd.read_csv(path, dtype={"firm_id": str, "sector": str})
    missing = [c for c in REQUIRED_COLUMNS if c not in raw.columns]
    if missing:
        raise PanelFormatError(f"missing required columns: {missing}")
    has_ret = "ret" in raw.columns
    has_price = "price" in raw.columns
    if not has_ret and not has_price:
        raise PanelFormatError("panel needs a ret column (monthly) or a price column (daily)")

    flags: list = []
    if has_ret:
        frame = raw.copy()
        frame["month"] = _parse_month(frame["date"])
        frame = frame.drop(columns=["date"])
    else:
        frame = _daily_to_monthly(raw, min_days=min_days, flags=flags)

    keep = ["firm_id", "month", "ret", "volume_usd", "esg", "sector"]
    for c in PILLAR_COLUMNS + FUNDAMENTAL_COLUMNS + ("sigma",):
        if c in frame.columns:
            keep.append(c)
    frame = frame[keep].sort_values(["firm_id", "month"]).reset_index(drop=True)
    for c in frame.columns:
        if c not in ("firm_id", "month", "sector"):
            frame[c] = pd.to_numeric(frame[c], errors="coerce")
    _validate_core(frame)
    schema = {c: "base" for c in frame.columns}
    return PanelDataset(frame=frame, schema=schema, flags=flags)


def compound_monthly_returns(daily: pd.DataFrame, min_days: int = 10):
    """Per-firm monthly compounded returns from dated positive prices.

    Input columns: firm_id, date, price. Returns a frame (firm_id, month,
    ret, n_days, sigma) where ret = prod(1 + daily ret) - 1 over the month's
    daily returns, missing when fewer than ``min_days`` daily returns, and
    sigma is the within-month sample sd of daily returns (missing below 5
    observations or for a constant series). Non-positive prices are rejected
    row-wise and reported in the second return value.
    """
    rejected = daily[~(pd.to_numeric(daily["price"], errors="coerce") > 0)]
    diagnostics = [
        {"firm_id": str(r.firm_id), "date": str(r.date), "price": r.price}
        for r in rejected.itertuples()
    ]
    ok = daily[pd.to_numeric(daily["price"], errors="coerce") > 0].copy()
    if ok.empty:
        out = pd.DataFrame(columns=["firm_id", "month", "ret", "n_days", "sigma"])
        return out, diagnostics
    ok["price"] = pd.to_numeric(ok["price"])
    ok["date"] = pd.to_datetime(ok["date"], format="mixed")
    ok = ok.sort_values(["firm_id", "date"])
    ok["dret"] = ok.groupby("firm_id")["price"].pct_change()
    ok["month"] = ok["date"].dt.to_period("M")

    def _agg(g: pd.DataFrame) -> pd.Series:
        d = g["dret"].dropna()
        n = len(d)
        ret = float(np.prod(1.0 + d.to_numpy()) - 1.0) if n >= min_days else np.nan
        if n >= 5:
            sd = float(d.std(ddof=1))
            sigma = sd if sd > 0 else np.nan
        else:
            sigma = np.nan
        return pd.Series({"ret": ret, "n_days": n, "sigma": sigma})

    out = ok.groupby(["firm_id", "month"], sort=True).apply(_agg, include_groups=False).reset_index()
    return out, diagnostics


def _daily_to_monthly(raw: pd.DataFrame, min_days: int, flags: list) -> pd.DataFrame:
    monthly, diagnostics = compound_monthly_returns(raw[["firm_id", "date", "price"]], min_days=min_days)
    if diagnostics:
        flags.append(f"rejected {len(diagnostics)} non-positive price rows")
    sigma_flat = monthly["sigma"].isna() & monthly["n_days"].ge(5)
    if sigma_flat.any():
        flags.append(f"{int(sigma_flat.sum())} firm-months with zero realized volatility -> sigma missing")

    work = raw.copy()
    work["date"] = pd.to_datetime(work["date"], format="mixed")
    work["month"] = work["date"].dt.to_period("M")
    work = work.sort_values(["firm_id", "date"])
    vol = (
        work.assign(volume_usd=pd.to_numeric(work["volume_usd"], errors="coerce"))
        .groupby(["firm_id", "month"], sort=True)["volume_usd"]
        .sum(min_count=1)
        .reset_index()
    )
    attrs = [c for c in raw.columns if c not in ("date", "price", "volume_usd")]
    last = work.groupby(["firm_id", "month"], sort=True)[attrs].last().reset_index()
    frame = monthly.drop(columns=["n_days"]).merge(vol, on=["firm_id", "month"], how="left")
    frame = frame.merge(last, on=["firm_id", "month"], how="left")
    return frame


def derive_controls(panel: PanelDataset) -> PanelDataset:
    """Append size = log(at) and the four at-scaled ratios.

    Rows with at <= 0 (or missing) get missing controls; missings propagate.
    """
    frame = panel.frame.copy()
    missing_fund = [c for c in FUNDAMENTAL_COLUMNS if c not in frame.columns]
    if missing_fund:
        raise PanelFormatError(f"cannot derive controls, missing fundamentals: {missing_fund}")
    at = frame["at"].to_numpy(dtype=float)
    good = np.isfinite(at) & (at > 0)
    at_safe = np.where(good, at, np.nan)
    frame["size"] = np.log(at_safe)
    for name, (num, den) in RATIO_CONTROLS.items():
        frame[name] = frame[num].to_numpy(dtype=float) / at_safe
    schema = dict(panel.schema)
    for c in CONTROL_COLUMNS:
        schema[c] = "control"
    return panel.replace(frame=frame, schema=schema)


def filter_by_missing_rate(panel: PanelDataset, threshold: float = 0.20, columns=None):
    """Drop control columns whose missing fraction is >= threshold.

    Keep rule is strict less-than. Returns (panel, report) where report is a
    list of {column, missing_rate, kept} entries for every checked column.
    """
    if not 0.0 < threshold <= 1.0:
        raise ValueError(f"threshold must be in (0, 1], got {threshold}")
    cols = list(columns) if columns is not None else [c for c in CONTROL_COLUMNS if c in panel.frame.columns]
    n = len(panel.frame)
    report = []
    dropped = []
    for c in cols:
        rate = float(panel.frame[c].isna().sum()) / n if n else 0.0
        kept = rate < threshold
        report.append({"column": c, "missing_rate": rate, "kept": bool(kept)})
        if not kept:
            dropped.append(c)
    frame = panel.frame.drop(columns=dropped)
    schema = {k: v for k, v in panel.schema.items() if k not in dropped}
    flags = list(panel.flags)
    if dropped:
        flags.append(f"dropped columns over missing threshold: {dropped}")
    return panel.replace(frame=frame, schema=schema, flags=flags), report


def standardize_controls(
    panel: PanelDataset,
    columns=None,
    winsor=(0.01, 0.99),
    mode: str = "pooled",
) -> PanelDataset:
    """Winsorize per month at the given percentiles, then z-score.

    mode "pooled" (default) z-scores over the whole panel; "per_month"
    z-scores within each month. Zero-variance columns are centered and left
    at scale 1 with a flag. Winsor bounds and moments land in ``transforms``.
    """
    if mode not in ("pooled", "per_month"):
        raise ValueError(f"unknown standardization mode: {mode}")
    lo_p, hi_p = winsor
    if not 0.0 <= lo_p < hi_p <= 1.0:
        raise ValueError(f"bad winsor percentiles: {winsor}")
    cols = list(columns) if columns is not None else [c for c in CONTROL_COLUMNS if c in panel.frame.columns]
    frame = panel.frame.copy()
    flags = list(panel.flags)
    transforms = dict(panel.transforms)
    months = frame["month"]
    for c in cols:
        vals = frame[c].astype(float)

        def _clip(g: pd.Series) -> pd.Series:
            gv = g.dropna()
            if gv.empty:
                return g
            lo = gv.quantile(lo_p)
            hi = gv.quantile(hi_p)
            return g.clip(lower=lo, upper=hi)

        clipped = vals.groupby(months, observed=True).transform(_clip)
        rec = {"winsor": [lo_p, hi_p], "mode": mode}
        if mode == "pooled":
            mu = float(clipped.mean())
            sd = float(clipped.std(ddof=1))
            # constant columns come back with float-noise sd (~1e-17), not 0
            if not np.isfinite(sd) or sd < 1e-12 * max(abs(mu), 1.0):
                flags.append(f"zero-variance control left unscaled: {c}")
                sd = 1.0
            frame[c] = (clipped - mu) / sd
            rec["mean"] = mu
            rec["sd"] = sd
        else:
            mu = clipped.groupby(months, observed=True).transform("mean")
            sd = clipped.groupby(months, observed=True).transform(lambda g: g.std(ddof=1))
            bad = ~np.isfinite(sd) | (sd < 1e-12 * np.maximum(np.abs(mu), 1.0))
            if bad.any():
                flags.append(f"zero-variance month cells left unscaled: {c}")
                sd = sd.where(~bad, 1.0)
            frame[c] = (clipped - mu) / sd
            rec["mean"] = "per_month"
            rec["sd"] = "per_month"
        transforms[c] = rec
    schema = dict(panel.schema)
    for c in cols:
        schema[c] = "control_std"
    return panel.replace(frame=frame, schema=schema, flags=flags, transforms=transforms)


def lag_columns(panel: PanelDataset, columns, lag: int = 1) -> PanelDataset:
    """Append calendar-lagged copies named ``{col}_l{lag}``.

    Calendar months, not previous observations: a firm observed in Jan and
    Mar has a missing Mar lag-1. Originals are preserved.
    """
    if lag < 1:
        raise ValueError(f"lag must be >= 1, got {lag}")
    unknown = [c for c in columns if c not in panel.frame.columns]
    if unknown:
        raise KeyError(f"cannot lag unknown columns: {unknown}")
    frame = panel.frame.copy()
    schema = dict(panel.schema)
    src = frame[["firm_id", "month"] + list(columns)].copy()
    src["month"] = src["month"] + lag
    renames = {c: f"{c}_l{lag}" for c in columns}
    src = src.rename(columns=renames)
    frame = frame.merge(src, on=["firm_id", "month"], how="left", validate="one_to_one")
    for c in columns:
        schema[renames[c]] = "lagged"
    return panel.replace(frame=frame, schema=schema)


def compute_excess_returns(panel: PanelDataset, regime) -> PanelDataset:
    """Append excess_ret = ret - market return of the same month."""
    rm = dict(zip(regime.months, regime.market_return))
    months = panel.frame["month"]
    absent = sorted({str(m) for m in months.unique() if m not in rm})
    if absent:
        raise ValueError(f"months missing from market series: {absent}")
    mr = months.map(rm).astype(float)
    out = panel._with_column("excess_ret", panel.frame["ret"].to_numpy(dtype=float) - mr.to_numpy(), "outcome")
    return out


def encode_sectors(panel: PanelDataset):
    """One-hot sector indicators dropping the lexicographically smallest label.

    Returns (fragment, mapping, flags): fragment is a float frame aligned to
    the panel rows, mapping records label -> column (reference -> None).
    """
    sec = panel.frame["sector"]
    if sec.isna().any():
        raise ValueError(f"{int(sec.isna().sum())} rows with missing sector")
    labels = sorted(sec.unique())
    flags = []
    if len(labels) == 1:
        flags.append("single-sector panel: no indicator columns, intercept absorbs the level")
        return pd.DataFrame(index=panel.frame.index), {labels[0]: None}, flags
    reference = labels[0]
    mapping = {reference: None}
    data = {}
    for lab in labels[1:]:
        col = f"sec_{lab}"
        mapping[lab] = col
        data[col] = (sec == lab).to_numpy(dtype=float)
    return pd.DataFrame(data, index=panel.frame.index), mapping, flags
