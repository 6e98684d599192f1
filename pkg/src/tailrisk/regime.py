"""Volume/volatility-weighted market return and the stress regime flag.

Weights for month t use the prior month's dollar volume and realized
volatility: raw weight V^(1/3)/sigma, normalized over the month's eligible
firms (non-missing return and weight inputs). Stress months are the bottom
``level`` fraction of the market-return distribution under the lower
empirical quantile convention: the cutoff is the ceil(level*T)-th order
statistic and ties at the cutoff classify as stress.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import pandas as pd


def realized_vol(daily_returns) -> float:
    """Sample sd of a month's daily returns; missing below 5 obs or if flat."""
    arr = np.asarray(pd.Series(daily_returns).dropna(), dtype=float)
    if arr.size < 5:
        return float("nan")
    sd = float(np.std(arr, ddof=1))
    return sd if sd > 0.0 else float("nan")


def firm_weight(volume_usd: float, sigma: float) -> float:
    """Raw market weight V^(1/3) / sigma."""
    if sigma <= 0.0:
        raise ValueError(f"sigma must be positive, got {sigma}")
    if volume_usd < 0.0:
        raise ValueError(f"volume_usd must be non-negative, got {volume_usd}")
    return float(np.cbrt(volume_usd) / sigma)


@dataclass
class RegimeSeries:
    """Monthly market return with the stress classification attached."""

    months: list
    market_return: np.ndarray
    stress: np.ndarray
    cutoff: float
    quantile_level: float
    excluded_months: list = field(default_factory=list)
    flags: list = field(default_factory=list)

    @property
    def n_stress(self) -> int:
        return int(self.stress.sum())

    def recompute_flags(self) -> np.ndarray:
        """Stress flags reproduced from the stored cutoff (must match)."""
        return self.market_return <= self.cutoff

    def to_frame(self) -> pd.DataFrame:
        return pd.DataFrame(
            {
                "month": [str(m) for m in self.months],
                "market_return": self.market_return,
                "stress": self.stress.astype(int),
            }
        )


def market_weights(panel, min_eligible: int = 30) -> pd.DataFrame:
    """Per (firm, month) weight table dated to the return month.

    volume_usd and sigma columns hold the PRIOR calendar month's values (the
    weight subscript is t-1); raw_weight is missing when either input is
    missing or sigma is non-positive. normalized_weight spans each month's
    eligible firms (return and raw weight both present) and sums to 1 there;
    months with fewer than ``min_eligible`` eligible firms carry missing
    normalized weights and are reported by ``market_return``.
    """
    frame = panel.frame
    if "sigma" not in frame.columns:
        raise ValueError(
            "market weights need a sigma column: supply daily prices or a sigma column in the monthly panel"
        )
    src = frame[["firm_id", "month", "volume_usd", "sigma"]].copy()
    src["month"] = src["month"] + 1
    w = frame[["firm_id", "month", "ret"]].merge(src, on=["firm_id", "month"], how="left")
    vol = w["volume_usd"].to_numpy(dtype=float)
    sig = w["sigma"].to_numpy(dtype=float)
    ok = np.isfinite(vol) & np.isfinite(sig) & (vol >= 0.0) & (sig > 0.0)
    raw = np.full(len(w), np.nan)
    raw[ok] = np.cbrt(vol[ok]) / sig[ok]
    w["raw_weight"] = raw
    eligible = np.isfinite(raw) & w["ret"].notna().to_numpy()
    w["eligible"] = eligible
    sums = w["raw_weight"].where(eligible).groupby(w["month"], observed=True).transform("sum")
    counts = pd.Series(eligible, index=w.index).groupby(w["month"], observed=True).transform("sum")
    norm = w["raw_weight"].where(eligible) / sums.where(sums > 0)
    norm[counts < min_eligible] = np.nan
    w["normalized_weight"] = norm
    return w.drop(columns=["ret"])


def market_return(panel, weights: pd.DataFrame | None = None, min_eligible: int = 30):
    """Weighted monthly market return.

    Returns (months, r_m, excluded_months, flags). Months whose eligible-firm
    count falls below ``min_eligible`` are excluded and flagged; if every
    month is excluded a ValueError is raised.
    """
    if weights is None:
        weights = market_weights(panel, min_eligible=min_eligible)
    frame = panel.frame[["firm_id", "month", "ret"]].merge(
        weights[["firm_id", "month", "normalized_weight", "eligible"]],
        on=["firm_id", "month"],
        how="left",
    )
    use = frame["normalized_weight"].notna() & frame["ret"].notna()
    part = frame[use]
    rm = (part["ret"] * part["normalized_weight"]).groupby(part["month"], observed=True).sum()
    all_months = sorted(frame["month"].unique())
    got = set(rm.index)
    excluded = [m for m in all_months if m not in got]
    flags = []
    if excluded:
        flags.append(f"excluded {len(excluded)} months with fewer than {min_eligible} eligible firms")
    if not len(rm):
        raise ValueError("no month clears the eligible-firm minimum; market series is empty")
    months = sorted(got)
    return months, rm.loc[months].to_numpy(dtype=float), excluded, flags


def classify_stress(months, market_ret, level: float = 0.15) -> RegimeSeries:
    """Flag the bottom ``level`` fraction of months as stress.

    Cutoff is the k-th order statistic with k = ceil(level*T), computed as
    ceil(level*T - 1e-9) so decimal-intended products (0.15*100) stay exact;
    the flag rule is r_m <= cutoff, so ties at the cutoff are stress.
    """
    r = np.asarray(market_ret, dtype=float)
    T = r.shape[0]
    if T < 20:
        raise ValueError(f"need at least 20 months to classify stress, got {T}")
    if not 0.0 < level < 0.5:
        raise ValueError(f"quantile level must be in (0, 0.5), got {level}")
    k = math.ceil(level * T - 1e-9)
    cutoff = float(np.partition(r, k - 1)[k - 1])
    stress = r <= cutoff
    flags = []
    n_stress = int(stress.sum())
    if n_stress > k:
        flags.append(f"ties at the cutoff added {n_stress - k} months beyond the nominal {k}")
    if np.all(r == r[0]):
        flags.append("degenerate market distribution: all returns equal, every month flagged")
    return RegimeSeries(
        months=list(months),
        market_return=r,
        stress=stress,
        cutoff=cutoff,
        quantile_level=level,
        flags=flags,
    )


def build_regime(panel, level: float = 0.15, min_eligible: int = 30) -> RegimeSeries:
    """Panel -> weights -> market return -> stress flags, in one call."""
    months, rm, excluded, flags = market_return(panel, min_eligible=min_eligible)
    regime = classify_stress(months, rm, level=level)
    regime.excluded_months = excluded
    regime.flags = flags + regime.flags
    return regime


def regime_summary(regime: RegimeSeries, bins: int = 20) -> dict:
    """Figure-ready summary: cutoff, share, stress list, histogram counts."""
    counts, edges = np.histogram(regime.market_return, bins=bins)
    stress_rows = [
        {"month": str(m), "market_return": float(r)}
        for m, r, s in zip(regime.months, regime.market_return, regime.stress)
        if s
    ]
    return {
        "cutoff": regime.cutoff,
        "level": regime.quantile_level,
        "n_months": len(regime.months),
        "n_stress": regime.n_stress,
        "stress_share": regime.n_stress / len(regime.months),
        "quantile_convention": "lower_empirical",
        "stress_months": stress_rows,
        "histogram": {"bin_edges": edges.tolist(), "counts": counts.tolist()},
        "excluded_months": [str(m) for m in regime.excluded_months],
        "flags": list(regime.flags),
    }
