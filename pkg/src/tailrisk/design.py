"""Design-matrix assembly shared by the crash, quantile, and DML estimators.

Builders subset panel rows to months covered by the regime series, attach
the stress flag, lagged treatment, sector indicators, and lagged
standardized controls, and return flat numpy designs with named columns and
integer month codes for clustering. Rank problems raise
``RankDeficientError`` naming the offending columns.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg

from .errors import RankDeficientError
from .panel import CONTROL_COLUMNS, encode_sectors

TREATMENT_LAG = "esg_l1"
CONTROL_LAGS = tuple(f"{c}_l1" for c in CONTROL_COLUMNS)


@dataclass
class Design:
    """Flat estimation-ready slice of the panel."""

    y: np.ndarray
    X: np.ndarray
    columns: list
    month_codes: np.ndarray
    months: list
    stress: np.ndarray
    meta: dict = field(default_factory=dict)

    @property
    def n_obs(self) -> int:
        return int(self.y.shape[0])

    def subset(self, mask: np.ndarray) -> "Design":
        """Row subset; month codes are relabeled to the surviving months."""
        mask = np.asarray(mask, dtype=bool)
        codes = self.month_codes[mask]
        kept = np.unique(codes)
        remap = {int(c): i for i, c in enumerate(kept)}
        new_codes = np.array([remap[int(c)] for c in codes], dtype=np.int64)
        return Design(
            y=self.y[mask],
            X=self.X[mask],
            columns=list(self.columns),
            month_codes=new_codes,
            months=[self.months[int(c)] for c in kept],
            stress=self.stress[mask],
            meta={k: v for k, v in self.meta.items() if not k.startswith("_")},
        )

    def drop_empty_columns(self, protect=("const",)):
        """Drop all-zero columns (e.g. sector dummies absent from a cell)."""
        keep = []
        dropped = []
        for j, name in enumerate(self.columns):
            if name not in protect and not np.any(self.X[:, j] != 0.0):
                dropped.append(name)
            else:
                keep.append(j)
        if not dropped:
            return self, []
        out = Design(
            y=self.y,
            X=np.ascontiguousarray(self.X[:, keep]),
            columns=[self.columns[j] for j in keep],
            month_codes=self.month_codes,
            months=list(self.months),
            stress=self.stress,
            meta={k: v for k, v in self.meta.items() if not k.startswith("_")},
        )
        return out, dropped


def check_full_rank(X: np.ndarray, columns, context: str = "design") -> None:
    """QR with column pivoting; raises naming the dependent columns."""
    n, p = X.shape
    if n < p:
        raise RankDeficientError(f"{context}: {n} rows < {p} columns")
    r, piv = scipy.linalg.qr(X, mode="r", pivoting=True)
    diag = np.abs(np.diag(r))
    if diag.size == 0 or diag[0] == 0.0:
        raise RankDeficientError(f"{context}: all-zero design")
    tol = diag[0] * max(n, p) * np.finfo(float).eps
    bad = [columns[piv[i]] for i in range(p) if diag[i] <= tol]
    if bad:
        raise RankDeficientError(f"{context}: collinear columns {bad}")


def _month_codes(month_values, regime):
    month_list = list(regime.months)
    index = {m: i for i, m in enumerate(month_list)}
    codes = np.array([index[m] for m in month_values], dtype=np.int64)
    return codes, month_list


def _base_mask(frame, needed):
    mask = np.ones(len(frame), dtype=bool)
    for c in needed:
        mask &= frame[c].notna().to_numpy()
    return mask


def assemble_design(
    panel,
    regime,
    outcome: str,
    *,
    with_stress_terms: bool = False,
    with_controls: bool = True,
    extra_required=(),
    treatment: str = TREATMENT_LAG,
) -> Design:
    """Common builder.

    Column order: const, sector dummies, treatment, then (if requested)
    stress and treatment-x-stress, then lagged controls. Rows must fall in a
    regime month and have outcome, treatment, sector, and (when used)
    controls present. Empty sector dummies are dropped silently into meta.
    """
    frame = panel.frame
    regime_months = set(regime.months)
    in_regime = frame["month"].isin(regime_months).to_numpy()
    needed = [outcome, treatment]
    if with_controls:
        needed += [c for c in CONTROL_LAGS]
    needed += list(extra_required)
    missing_cols = [c for c in needed if c not in frame.columns]
    if missing_cols:
        raise KeyError(f"design needs columns not present in panel: {missing_cols}")
    mask = _base_mask(frame, needed) & in_regime & frame["sector"].notna().to_numpy()

    sub = frame[mask]
    sectors, mapping, sector_flags = encode_sectors(panel.replace(frame=sub))
    codes, month_list = _month_codes(sub["month"], regime)
    stress_by_month = dict(zip(regime.months, regime.stress))
    stress = np.array([stress_by_month[m] for m in sub["month"]], dtype=bool)

    cols = ["const"]
    blocks = [np.ones((len(sub), 1))]
    if sectors.shape[1]:
        cols += list(sectors.columns)
        blocks.append(sectors.to_numpy(dtype=float))
    cols.append(treatment)
    treat = sub[treatment].to_numpy(dtype=float)
    blocks.append(treat[:, None])
    if with_stress_terms:
        cols += ["stress", "esg_x_stress"]
        sf = stress.astype(float)
        blocks.append(sf[:, None])
        blocks.append((treat * sf)[:, None])
    if with_controls:
        for c in CONTROL_LAGS:
            cols.append(c)
            blocks.append(sub[c].to_numpy(dtype=float)[:, None])
    X = np.ascontiguousarray(np.hstack(blocks))
    y = sub[outcome].to_numpy(dtype=float)
    design = Design(
        y=y,
        X=X,
        columns=cols,
        month_codes=codes,
        months=month_list,
        stress=stress,
        meta={
            "outcome": outcome,
            "treatment": treatment,
            "n_dropped_rows": int(len(frame) - len(sub)),
            "sector_mapping": mapping,
            "flags": list(sector_flags),
        },
    )
    design, dropped = design.drop_empty_columns()
    if dropped:
        design.meta["dropped_empty_columns"] = dropped
    return design


def nuisance_matrix(panel, regime, *, extra_required=()):
    """Confounder block for DML: sector dummies + lagged controls, no const.

    Returns (frame_mask, W, column names); rows align with assemble_design
    masks built from the same required sets.
    """
    frame = panel.frame
    regime_months = set(regime.months)
    needed = list(CONTROL_LAGS) + list(extra_required)
    mask = (
        _base_mask(frame, needed)
        & frame["month"].isin(regime_months).to_numpy()
        & frame["sector"].notna().to_numpy()
    )
    sub = frame[mask]
    sectors, mapping, _ = encode_sectors(panel.replace(frame=sub))
    cols = list(sectors.columns) + list(CONTROL_LAGS)
    parts = []
    if sectors.shape[1]:
        parts.append(sectors.to_numpy(dtype=float))
    parts.append(sub[list(CONTROL_LAGS)].to_numpy(dtype=float))
    W = np.ascontiguousarray(np.hstack(parts)) if parts else np.empty((len(sub), 0))
    return mask, W, cols
